#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "vground/model.hpp"

namespace vground {

namespace {

constexpr char kCkptMagic[8] = {'V', 'G', 'C', 'K', 'P', 'T', '1', '\0'};

}  // namespace

void save_checkpoint(const Model<float>& model, const std::string& path) {
    nlohmann::ordered_json manifest;
    manifest["format_version"] = 1;
    nlohmann::ordered_json params = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    for (const auto& p : model.parameters()) {
        nlohmann::ordered_json entry;
        entry["name"] = p.name;
        entry["shape"] = p.value.shape();
        entry["offset"] = offset;
        entry["count"] = p.value.size();
        params.push_back(std::move(entry));
        offset += static_cast<std::uint64_t>(p.value.size()) * sizeof(float);
    }
    manifest["params"] = std::move(params);
    const std::string json_text = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kCkptMagic, 8);
    const std::uint64_t json_len = json_text.size();
    out.write(reinterpret_cast<const char*>(&json_len), 8);
    out.write(json_text.data(), static_cast<std::streamsize>(json_text.size()));
    for (const auto& p : model.parameters())
        out.write(reinterpret_cast<const char*>(p.value.data().data()),
                  static_cast<std::streamsize>(p.value.data().size() * sizeof(float)));
    if (!out) throw IoError("short write on checkpoint: " + path);
}

void load_checkpoint(Model<float>& model, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCkptMagic, 8) != 0) throw IoError("bad checkpoint magic in " + path);
    std::uint64_t json_len = 0;
    in.read(reinterpret_cast<char*>(&json_len), 8);
    if (!in || json_len > (1ull << 30)) throw IoError("bad checkpoint header in " + path);
    std::string json_text(json_len, '\0');
    in.read(json_text.data(), static_cast<std::streamsize>(json_len));
    if (!in) throw IoError("truncated checkpoint manifest in " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
    }
    if (manifest.at("format_version").get<int>() != 1) throw IoError("unsupported checkpoint format_version");

    struct Entry {
        std::vector<int> shape;
        std::uint64_t offset;
        int count;
    };
    std::unordered_map<std::string, Entry> entries;
    for (const auto& p : manifest.at("params"))
        entries[p.at("name").get<std::string>()] = {p.at("shape").get<std::vector<int>>(),
                                                    p.at("offset").get<std::uint64_t>(), p.at("count").get<int>()};

    // Validate the full parameter census before touching any weight.
    std::string problems;
    for (const auto& p : model.parameters()) {
        auto it = entries.find(p.name);
        if (it == entries.end()) {
            problems += "  missing in checkpoint: " + p.name + "\n";
        } else if (it->second.shape != p.value.shape()) {
            problems += "  shape mismatch: " + p.name + "\n";
        }
    }
    if (entries.size() != model.parameters().size())
        for (const auto& [name, entry] : entries)
            if (model.find_parameter(name) == nullptr) problems += "  unknown parameter in checkpoint: " + name + "\n";
    if (!problems.empty()) throw IoError("checkpoint does not fit this architecture:\n" + problems);

    const std::streampos blob_start = in.tellg();
    for (auto& p : model.parameters()) {
        const Entry& e = entries.at(p.name);
        in.seekg(blob_start + static_cast<std::streamoff>(e.offset));
        auto dst = p.value.mutable_data();
        in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(float)));
        if (!in) throw IoError("truncated checkpoint blob in " + path);
    }
}

}  // namespace vground
