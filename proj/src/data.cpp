#include "vground/data.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace vground {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

const char* query_kind_name(QueryKind k) {
    switch (k) {
        case QueryKind::Visual: return "visual";
        case QueryKind::Text: return "text";
        case QueryKind::Category: return "category";
    }
    return "?";
}

QueryKind query_kind_from_name(const std::string& name) {
    if (name == "visual") return QueryKind::Visual;
    if (name == "text") return QueryKind::Text;
    if (name == "category") return QueryKind::Category;
    throw IoError("unknown query kind: " + name);
}

double box_iou(const Box& a, const Box& b) {
    const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2, ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
    const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2, by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
    const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    const double inter = iw * ih;
    const double uni = static_cast<double>(a.w) * a.h + static_cast<double>(b.w) * b.h - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

int ConceptBank::token_id(const std::string& word) const {
    auto it = std::find(vocab.begin(), vocab.end(), word);
    if (it == vocab.end()) throw ContractError("word not in vocabulary: " + word);
    return static_cast<int>(it - vocab.begin());
}

std::vector<int> ConceptBank::nlq_phrase(int concept_id) const {
    return {token_id("where"), token_id("is"), token_id("thing" + std::to_string(concept_id))};
}

std::vector<int> ConceptBank::mq_phrase(int concept_id) const {
    return {token_id("when"), token_id("did"), token_id("i"), token_id("do"),
            token_id("thing" + std::to_string(concept_id))};
}

std::vector<const Episode*> Dataset::split(const std::string& name) const {
    std::vector<const Episode*> out;
    for (const auto& ep : episodes)
        if (ep.split == name) out.push_back(&ep);
    return out;
}

const Episode* Dataset::find_episode(const std::string& id) const {
    for (const auto& ep : episodes)
        if (ep.id == id) return &ep;
    return nullptr;
}

namespace {

VideoTensor gather_frames(const VideoTensor& v, const std::vector<int>& frames) {
    const int h = v.frames.dim(1), w = v.frames.dim(2), c = v.frames.dim(3);
    const std::size_t frame_elems = static_cast<std::size_t>(h) * w * c;
    VideoTensor out;
    out.fps_tag = v.fps_tag;
    out.frames = Array<float>({static_cast<int>(frames.size()), h, w, c});
    auto dst = out.frames.mutable_data();
    auto src = v.frames.data();
    for (std::size_t i = 0; i < frames.size(); ++i)
        std::copy(src.begin() + static_cast<std::ptrdiff_t>(frames[i] * frame_elems),
                  src.begin() + static_cast<std::ptrdiff_t>((frames[i] + 1) * frame_elems),
                  dst.begin() + static_cast<std::ptrdiff_t>(i * frame_elems));
    return out;
}

}  // namespace

VideoTensor subsample_video(const VideoTensor& v, int stride) {
    if (stride < 1) throw ConfigError("subsample_video: stride must be >= 1");
    if (stride == 1) return v;
    std::vector<int> frames;
    for (int t = 0; t < v.length(); t += stride) frames.push_back(t);
    return gather_frames(v, frames);
}

VideoTensor crop_window(const VideoTensor& v, int start, int len) {
    if (start < 0 || len < 1 || start + len > v.length()) throw ContractError("crop_window: bad range");
    std::vector<int> frames(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) frames[static_cast<std::size_t>(i)] = start + i;
    return gather_frames(v, frames);
}

// ---------------------------------------------------------------------------
// Binary tensor file
// ---------------------------------------------------------------------------

namespace {

constexpr char kTensorMagic[8] = {'V', 'G', 'T', 'E', 'N', 'S', 'R', '1'};

void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t read_u32(std::istream& in, const std::string& path) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in) throw IoError("truncated tensor file: " + path);
    return v;
}

}  // namespace

void write_tensor_file(const std::string& path, const Array<float>& a) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write tensor file: " + path);
    out.write(kTensorMagic, 8);
    write_u32(out, static_cast<std::uint32_t>(a.rank()));
    for (int i = 0; i < a.rank(); ++i) write_u32(out, static_cast<std::uint32_t>(a.dim(i)));
    out.write(reinterpret_cast<const char*>(a.data().data()),
              static_cast<std::streamsize>(a.data().size() * sizeof(float)));
    if (!out) throw IoError("short write on tensor file: " + path);
}

Array<float> read_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open tensor file: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kTensorMagic, 8) != 0) throw IoError("bad tensor magic in " + path);
    const std::uint32_t ndim = read_u32(in, path);
    if (ndim > 8) throw IoError("implausible tensor rank in " + path);
    std::vector<int> shape(ndim);
    std::size_t count = 1;
    for (auto& d : shape) {
        d = static_cast<int>(read_u32(in, path));
        count *= static_cast<std::size_t>(d);
    }
    std::vector<float> data(count);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float))
        throw IoError("tensor data shorter than header promises: " + path);
    char extra;
    if (in.read(&extra, 1)) throw IoError("tensor data longer than header promises: " + path);
    return Array<float>(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Manifest JSON
// ---------------------------------------------------------------------------

namespace {

constexpr int kFormatVersion = 1;

ordered_json box_to_json(const Box& b) { return ordered_json::array({b.cx, b.cy, b.w, b.h}); }

Box box_from_json(const ordered_json& j) {
    return Box{j.at(0).get<float>(), j.at(1).get<float>(), j.at(2).get<float>(), j.at(3).get<float>()};
}

ordered_json segment_to_json(const Segment& s) { return ordered_json::array({s.start, s.end}); }

Segment segment_from_json(const ordered_json& j) { return Segment{j.at(0).get<int>(), j.at(1).get<int>()}; }

ordered_json grid_to_json(const Array<float>& grid) {
    ordered_json j;
    j["shape"] = grid.shape();
    ordered_json data = ordered_json::array();
    for (float v : grid.data()) data.push_back(v);
    j["data"] = std::move(data);
    return j;
}

Array<float> grid_from_json(const ordered_json& j) {
    std::vector<int> shape = j.at("shape").get<std::vector<int>>();
    std::vector<float> data = j.at("data").get<std::vector<float>>();
    return Array<float>(std::move(shape), std::move(data));
}

ordered_json query_to_json(const Query& q) {
    ordered_json j;
    j["kind"] = query_kind_name(q.kind);
    switch (q.kind) {
        case QueryKind::Visual: j["crop"] = grid_to_json(q.crop); break;
        case QueryKind::Text: j["tokens"] = q.tokens; break;
        case QueryKind::Category: j["category"] = q.category; break;
    }
    return j;
}

Query query_from_json(const ordered_json& j) {
    Query q;
    q.kind = query_kind_from_name(j.at("kind").get<std::string>());
    switch (q.kind) {
        case QueryKind::Visual: q.crop = grid_from_json(j.at("crop")); break;
        case QueryKind::Text: q.tokens = j.at("tokens").get<std::vector<int>>(); break;
        case QueryKind::Category: q.category = j.at("category").get<int>(); break;
    }
    return q;
}

ordered_json gen_cfg_to_json(const GenConfig& g) {
    ordered_json j;
    j["train_episodes"] = g.train_episodes;
    j["val_episodes"] = g.val_episodes;
    j["concepts"] = g.concepts;
    j["min_frames"] = g.min_frames;
    j["max_frames"] = g.max_frames;
    j["pattern_size"] = g.pattern_size;
    j["noise_sigma"] = g.noise_sigma;
    j["seed"] = g.seed;
    return j;
}

GenConfig gen_cfg_from_json(const ordered_json& j) {
    GenConfig g;
    g.train_episodes = j.at("train_episodes").get<int>();
    g.val_episodes = j.at("val_episodes").get<int>();
    g.concepts = j.at("concepts").get<int>();
    g.min_frames = j.at("min_frames").get<int>();
    g.max_frames = j.at("max_frames").get<int>();
    g.pattern_size = j.at("pattern_size").get<int>();
    g.noise_sigma = j.at("noise_sigma").get<double>();
    g.seed = j.at("seed").get<std::uint64_t>();
    return g;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& dir) {
    const fs::path root(dir);
    std::error_code ec;
    fs::create_directories(root / "episodes", ec);
    if (ec) throw IoError("cannot create dataset directory: " + dir);

    ordered_json root_json;
    root_json["format_version"] = kFormatVersion;
    root_json["gen_config"] = gen_cfg_to_json(ds.gen_cfg);

    ordered_json bank;
    bank["pattern_size"] = ds.bank.pattern_size;
    bank["channels"] = ds.bank.channels;
    ordered_json patterns = ordered_json::array();
    for (const auto& p : ds.bank.patterns) patterns.push_back(grid_to_json(p));
    bank["patterns"] = std::move(patterns);
    bank["vocab"] = ds.bank.vocab;
    root_json["concept_bank"] = std::move(bank);

    ordered_json episodes = ordered_json::array();
    for (const auto& ep : ds.episodes) {
        const std::string rel = "episodes/" + ep.id + ".bin";
        write_tensor_file((root / rel).string(), ep.video.frames);

        ordered_json e;
        e["id"] = ep.id;
        e["split"] = ep.split;
        e["file"] = rel;
        e["frames"] = ep.video.length();
        e["fps_tag"] = ep.video.fps_tag;

        ordered_json occs = ordered_json::array();
        for (const auto& occ : ep.occurrences) {
            ordered_json o;
            o["concept_id"] = occ.concept_id;
            o["segment"] = segment_to_json(occ.segment);
            ordered_json boxes = ordered_json::array();
            for (const auto& b : occ.boxes) boxes.push_back(box_to_json(b));
            o["boxes"] = std::move(boxes);
            occs.push_back(std::move(o));
        }
        e["occurrences"] = std::move(occs);

        ordered_json anns = ordered_json::array();
        for (const auto& ann : ep.annotations) {
            ordered_json a;
            a["id"] = ann.id;
            a["task"] = task_name(ann.task);
            a["query"] = query_to_json(ann.query);
            ordered_json segs = ordered_json::array();
            for (const auto& s : ann.segments) segs.push_back(segment_to_json(s));
            a["segments"] = std::move(segs);
            if (!ann.boxes.empty()) {
                ordered_json boxes = ordered_json::array();
                for (const auto& b : ann.boxes) boxes.push_back(box_to_json(b));
                a["boxes"] = std::move(boxes);
            }
            if (ann.query_frame >= 0) a["query_frame"] = ann.query_frame;
            if (ann.category_id >= 0) a["category_id"] = ann.category_id;
            if (ann.concept_id >= 0) a["concept_id"] = ann.concept_id;
            anns.push_back(std::move(a));
        }
        e["annotations"] = std::move(anns);
        episodes.push_back(std::move(e));
    }
    root_json["episodes"] = std::move(episodes);

    std::ofstream out(root / "manifest.json");
    if (!out) throw IoError("cannot write manifest under " + dir);
    out << root_json.dump(2) << "\n";
}

Dataset read_dataset(const std::string& dir) {
    const fs::path root(dir);
    std::ifstream in(root / "manifest.json");
    if (!in) throw IoError("cannot open manifest: " + (root / "manifest.json").string());
    ordered_json j;
    try {
        j = ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("manifest is not valid JSON: ") + e.what());
    }
    const int version = j.at("format_version").get<int>();
    if (version != kFormatVersion)
        throw IoError("unsupported dataset format_version " + std::to_string(version) + " (expected " +
                      std::to_string(kFormatVersion) + ")");

    Dataset ds;
    ds.format_version = version;
    ds.gen_cfg = gen_cfg_from_json(j.at("gen_config"));

    const auto& bank = j.at("concept_bank");
    ds.bank.pattern_size = bank.at("pattern_size").get<int>();
    ds.bank.channels = bank.at("channels").get<int>();
    for (const auto& p : bank.at("patterns")) ds.bank.patterns.push_back(grid_from_json(p));
    ds.bank.vocab = bank.at("vocab").get<std::vector<std::string>>();

    for (const auto& e : j.at("episodes")) {
        Episode ep;
        ep.id = e.at("id").get<std::string>();
        ep.split = e.at("split").get<std::string>();
        ep.video.fps_tag = e.at("fps_tag").get<int>();
        ep.video.frames = read_tensor_file((root / e.at("file").get<std::string>()).string());
        if (ep.video.length() != e.at("frames").get<int>())
            throw IoError("episode " + ep.id + ": tensor frame count disagrees with manifest");

        for (const auto& o : e.at("occurrences")) {
            Occurrence occ;
            occ.concept_id = o.at("concept_id").get<int>();
            occ.segment = segment_from_json(o.at("segment"));
            for (const auto& b : o.at("boxes")) occ.boxes.push_back(box_from_json(b));
            ep.occurrences.push_back(std::move(occ));
        }
        for (const auto& a : e.at("annotations")) {
            Annotation ann;
            ann.id = a.at("id").get<std::string>();
            ann.task = task_from_name(a.at("task").get<std::string>());
            ann.video_id = ep.id;
            ann.query = query_from_json(a.at("query"));
            for (const auto& s : a.at("segments")) ann.segments.push_back(segment_from_json(s));
            if (a.contains("boxes"))
                for (const auto& b : a.at("boxes")) ann.boxes.push_back(box_from_json(b));
            if (a.contains("query_frame")) ann.query_frame = a.at("query_frame").get<int>();
            if (a.contains("category_id")) ann.category_id = a.at("category_id").get<int>();
            if (a.contains("concept_id")) ann.concept_id = a.at("concept_id").get<int>();
            ep.annotations.push_back(std::move(ann));
        }
        ds.episodes.push_back(std::move(ep));
    }
    return ds;
}

}  // namespace vground
