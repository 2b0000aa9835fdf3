#pragma once

// The unified grounding network. One model answers visual, text, and
// activity-category queries over a frame window: a patch backbone embeds
// frames, a modality-specific encoder embeds the query, a per-frame fusion
// encoder mixes them, and a space-time decoder refines per-frame time
// embeddings that feed the prediction heads (box, start/end logits,
// foreground), 7 numbers per frame.

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vground/array.hpp"
#include "vground/config.hpp"
#include "vground/data.hpp"
#include "vground/rng.hpp"

namespace vground {

enum class Modality { Visual, Text };

template <typename Real>
struct FramePredictions {
    Array<Real> boxes;         // [T x 4] (cx, cy, w, h) in [0,1]
    Array<Real> start_logits;  // [T]
    Array<Real> end_logits;    // [T]
    Array<Real> foreground;    // [T] in (0,1)

    int length() const { return boxes.rank() == 2 ? boxes.dim(0) : 0; }
};

template <typename Real>
struct AttentionMaps {
    int layers = 0;
    int heads = 0;
    std::vector<Array<Real>> weights;  // layers*heads entries of [T x T]

    const Array<Real>& at(int layer, int head) const {
        return weights[static_cast<std::size_t>(layer) * static_cast<std::size_t>(heads) +
                       static_cast<std::size_t>(head)];
    }
};

template <typename Real>
struct ForwardResult {
    FramePredictions<Real> preds;
    AttentionMaps<Real> attention;
};

enum class ParamGroup { Backbone, Text, Rest };

template <typename Real>
struct NamedParam {
    std::string name;
    Array<Real> value;
    ParamGroup group;
};

namespace detail {

// Fixed sinusoidal position code, one row per position.
template <typename Real>
Array<Real> sinusoid_rows(int positions, int d) {
    Array<Real> out({positions, d});
    auto o = out.mutable_data();
    for (int t = 0; t < positions; ++t)
        for (int j = 0; j < d; ++j) {
            const double angle = t / std::pow(10000.0, 2.0 * (j / 2) / d);
            o[static_cast<std::size_t>(t) * d + j] =
                static_cast<Real>((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    return out;
}

// 2D positional code for an h x w grid: first half of d encodes the row
// index, second half the column index.
template <typename Real>
Array<Real> sinusoid_grid(int h, int w, int d) {
    const int half = d / 2;
    Array<Real> rows = sinusoid_rows<Real>(h, half);
    Array<Real> cols = sinusoid_rows<Real>(w, d - half);
    Array<Real> out({h * w, d});
    auto o = out.mutable_data();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            Real* dst = o.data() + (static_cast<std::size_t>(y) * w + x) * d;
            for (int j = 0; j < half; ++j) dst[j] = rows.at(y, j);
            for (int j = 0; j < d - half; ++j) dst[half + j] = cols.at(x, j);
        }
    return out;
}

}  // namespace detail

template <typename Real>
class Model {
  public:
    struct Linear {
        Array<Real> w;
        Array<Real> b;
    };
    struct Mha {
        Linear q, k, v, o;
    };
    struct EncoderLayer {
        Mha attn;
        Array<Real> ln1_g, ln1_b;
        Linear ffn1, ffn2;
        Array<Real> ln2_g, ln2_b;
    };
    struct DecoderLayer {
        Mha self_attn;
        Array<Real> ln1_g, ln1_b;
        Mha cross_attn;
        Array<Real> ln2_g, ln2_b;
        Linear ffn1, ffn2;
        Array<Real> ln3_g, ln3_b;
    };

    Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        rng_ = make_rng(mix_seed(seed, 0x90de1));
        const int d = cfg_.d;

        patch_proj_ = make_linear("backbone.patch_proj", cfg_.patch_dim(), d, ParamGroup::Backbone);
        pos2d_ = detail::sinusoid_grid<Real>(cfg_.grid_h, cfg_.grid_w, d);

        token_embed_ = make_param("text.token_embed", {cfg_.vocab, d}, ParamGroup::Text, InitKind::Embedding);
        text_layer_ = make_encoder_layer("text.layer", ParamGroup::Text);

        category_proj_ = make_linear("category.proj", cfg_.num_classes, d, ParamGroup::Rest);

        for (int l = 0; l < cfg_.enc_layers; ++l)
            encoder_.push_back(make_encoder_layer("encoder.l" + std::to_string(l), ParamGroup::Rest));

        if (cfg_.shared_time_embedding) {
            time_visual_ = make_param("time.shared", {1, d}, ParamGroup::Rest, InitKind::Embedding);
            time_text_ = time_visual_;
        } else {
            time_visual_ = make_param("time.visual", {1, d}, ParamGroup::Rest, InitKind::Embedding);
            time_text_ = make_param("time.text", {1, d}, ParamGroup::Rest, InitKind::Embedding);
        }

        for (int l = 0; l < cfg_.dec_layers; ++l)
            decoder_.push_back(make_decoder_layer("decoder.l" + std::to_string(l)));

        head_box1_ = make_linear("heads.box.l1", d, d, ParamGroup::Rest);
        head_box2_ = make_linear("heads.box.l2", d, d, ParamGroup::Rest);
        head_box3_ = make_linear("heads.box.l3", d, 4, ParamGroup::Rest);
        head_start_ = make_linear("heads.start", d, 1, ParamGroup::Rest);
        head_end_ = make_linear("heads.end", d, 1, ParamGroup::Rest);
        head_fg_ = make_linear("heads.foreground", d, 1, ParamGroup::Rest);
    }

    const ModelConfig& config() const { return cfg_; }
    std::vector<NamedParam<Real>>& parameters() { return params_; }
    const std::vector<NamedParam<Real>>& parameters() const { return params_; }

    const Array<Real>* find_parameter(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second].value;
    }

    // -- spec operations ------------------------------------------------

    // Per-frame patch embedding plus fixed 2D positions: T entries of [HW x d].
    std::vector<Array<Real>> encode_video(const VideoTensor& video) const {
        if (video.frames.rank() != 4) throw ShapeError("encode_video: video must be [T x H x W x c]");
        const int t_len = video.frames.dim(0);
        if (video.frames.dim(1) != cfg_.input_h || video.frames.dim(2) != cfg_.input_w ||
            video.frames.dim(3) != cfg_.channels)
            throw ConfigError("encode_video: frame grid does not match the model configuration");
        std::vector<Array<Real>> out;
        out.reserve(static_cast<std::size_t>(t_len));
        for (int t = 0; t < t_len; ++t) out.push_back(embed_frame(video.frames, t));
        return out;
    }

    // Modality-specific query encoding to [L x d].
    Array<Real> encode_query(const Query& query) const {
        switch (query.kind) {
            case QueryKind::Text: {
                if (query.tokens.empty()) throw ContractError("invalid query: empty token sequence");
                for (int id : query.tokens)
                    if (id < 0 || id >= cfg_.vocab) throw ContractError("invalid query: token id out of vocabulary");
                Array<Real> x = take_rows(token_embed_, query.tokens);
                x = add(x, detail::sinusoid_rows<Real>(static_cast<int>(query.tokens.size()), cfg_.d));
                return run_encoder_layer(text_layer_, x);
            }
            case QueryKind::Visual: {
                return embed_crop(query.crop);
            }
            case QueryKind::Category: {
                if (query.category < 0 || query.category >= cfg_.num_classes)
                    throw ContractError("invalid query: category index out of range");
                Array<Real> onehot({1, cfg_.num_classes});
                onehot.mutable_data()[static_cast<std::size_t>(query.category)] = Real(1);
                return apply_linear(category_proj_, onehot);
            }
        }
        throw ContractError("invalid query kind");
    }

    // Fuses query features into every k-th frame with the shared encoder
    // stack, then replicates each encoded frame across its stride group.
    std::vector<Array<Real>> video_query_encode(const std::vector<Array<Real>>& frames,
                                                const Array<Real>& query_features) const {
        const int t_len = static_cast<int>(frames.size());
        const int k = cfg_.encoder_stride;
        std::vector<Array<Real>> encoded_selected;
        for (int s = 0; s < t_len; s += k) {
            Array<Real> x = concat_rows<Real>({frames[static_cast<std::size_t>(s)], query_features});
            for (const auto& layer : encoder_) x = run_encoder_layer(layer, x);
            encoded_selected.push_back(std::move(x));
        }
        std::vector<Array<Real>> out;
        out.reserve(static_cast<std::size_t>(t_len));
        for (int t = 0; t < t_len; ++t) out.push_back(encoded_selected[static_cast<std::size_t>(t / k)]);
        return out;
    }

    // Refines modality-seeded time embeddings; temporal self-attention
    // weights are recorded for the guided-attention loss.
    std::pair<Array<Real>, AttentionMaps<Real>> space_time_decode(const std::vector<Array<Real>>& enc,
                                                                  Modality modality) const {
        const int t_len = static_cast<int>(enc.size());
        const Array<Real>& seed_vec = modality == Modality::Visual ? time_visual_ : time_text_;
        std::vector<Array<Real>> rows(static_cast<std::size_t>(t_len), seed_vec);
        Array<Real> e = concat_rows(rows);
        e = add(e, detail::sinusoid_rows<Real>(t_len, cfg_.d));

        AttentionMaps<Real> maps;
        maps.layers = cfg_.dec_layers;
        maps.heads = cfg_.heads;

        for (const auto& layer : decoder_) {
            auto self_res = attention(apply_linear(layer.self_attn.q, e), apply_linear(layer.self_attn.k, e),
                                      apply_linear(layer.self_attn.v, e), cfg_.heads);
            for (auto& w : self_res.head_weights) maps.weights.push_back(std::move(w));
            e = layer_norm(add(e, apply_linear(layer.self_attn.o, self_res.output)), layer.ln1_g, layer.ln1_b);

            // Frame-wise cross-attention: embedding t sees only enc[t]. Key
            // and value projections are cached per distinct encoded frame
            // (stride groups share them).
            Array<Real> q_all = apply_linear(layer.cross_attn.q, e);
            std::unordered_map<const void*, std::pair<Array<Real>, Array<Real>>> kv_cache;
            std::vector<Array<Real>> cross_rows;
            cross_rows.reserve(static_cast<std::size_t>(t_len));
            for (int t = 0; t < t_len; ++t) {
                const Array<Real>& enc_t = enc[static_cast<std::size_t>(t)];
                auto it = kv_cache.find(enc_t.key());
                if (it == kv_cache.end())
                    it = kv_cache
                             .emplace(enc_t.key(), std::make_pair(apply_linear(layer.cross_attn.k, enc_t),
                                                                  apply_linear(layer.cross_attn.v, enc_t)))
                             .first;
                auto res = attention(slice_rows(q_all, t, t + 1), it->second.first, it->second.second, cfg_.heads);
                cross_rows.push_back(std::move(res.output));
            }
            e = layer_norm(add(e, apply_linear(layer.cross_attn.o, concat_rows(cross_rows))), layer.ln2_g,
                           layer.ln2_b);

            Array<Real> f = apply_linear(layer.ffn2, relu(apply_linear(layer.ffn1, e)));
            e = layer_norm(add(e, f), layer.ln3_g, layer.ln3_b);
        }
        return {e, maps};
    }

    FramePredictions<Real> predict_heads(const Array<Real>& refined) const {
        const int t_len = refined.dim(0);
        FramePredictions<Real> preds;
        Array<Real> h = relu(apply_linear(head_box1_, refined));
        h = relu(apply_linear(head_box2_, h));
        preds.boxes = sigmoid(apply_linear(head_box3_, h));
        preds.start_logits = apply_linear(head_start_, refined).reshaped({t_len});
        preds.end_logits = apply_linear(head_end_, refined).reshaped({t_len});
        preds.foreground = sigmoid(apply_linear(head_fg_, refined)).reshaped({t_len});
        return preds;
    }

    ForwardResult<Real> forward(const VideoTensor& window, const Query& query) const {
        std::vector<Array<Real>> frames = encode_video(window);
        Array<Real> q = encode_query(query);
        std::vector<Array<Real>> enc = video_query_encode(frames, q);
        const Modality modality = query.kind == QueryKind::Visual ? Modality::Visual : Modality::Text;
        auto [refined, maps] = space_time_decode(enc, modality);
        ForwardResult<Real> result;
        result.preds = predict_heads(refined);
        result.attention = std::move(maps);
        return result;
    }

  private:
    enum class InitKind { Xavier, Zero, One, Embedding };

    Array<Real> make_param(const std::string& name, std::vector<int> shape, ParamGroup group, InitKind init) {
        Array<Real> value(shape);
        switch (init) {
            case InitKind::Xavier: {
                const int fan_in = shape.size() == 2 ? shape[0] : 1;
                const int fan_out = shape.size() == 2 ? shape[1] : shape[0];
                const Real limit = std::sqrt(Real(6) / static_cast<Real>(fan_in + fan_out));
                value = rand_uniform<Real>(shape, rng_, -limit, limit);
                break;
            }
            case InitKind::Zero: break;
            case InitKind::One: value = Array<Real>::full(shape, Real(1)); break;
            case InitKind::Embedding: value = randn<Real>(shape, rng_, Real(1)); break;
        }
        value.set_requires_grad(true);
        params_.push_back({name, value, group});
        index_[name] = params_.size() - 1;
        return value;
    }

    Linear make_linear(const std::string& name, int in, int out, ParamGroup group) {
        Linear lin;
        lin.w = make_param(name + ".w", {in, out}, group, InitKind::Xavier);
        lin.b = make_param(name + ".b", {out}, group, InitKind::Zero);
        return lin;
    }

    Mha make_mha(const std::string& name, ParamGroup group) {
        Mha mha;
        mha.q = make_linear(name + ".q", cfg_.d, cfg_.d, group);
        mha.k = make_linear(name + ".k", cfg_.d, cfg_.d, group);
        mha.v = make_linear(name + ".v", cfg_.d, cfg_.d, group);
        mha.o = make_linear(name + ".o", cfg_.d, cfg_.d, group);
        return mha;
    }

    EncoderLayer make_encoder_layer(const std::string& name, ParamGroup group) {
        EncoderLayer layer;
        layer.attn = make_mha(name + ".attn", group);
        layer.ln1_g = make_param(name + ".ln1.g", {cfg_.d}, group, InitKind::One);
        layer.ln1_b = make_param(name + ".ln1.b", {cfg_.d}, group, InitKind::Zero);
        layer.ffn1 = make_linear(name + ".ffn1", cfg_.d, cfg_.ffn_dim(), group);
        layer.ffn2 = make_linear(name + ".ffn2", cfg_.ffn_dim(), cfg_.d, group);
        layer.ln2_g = make_param(name + ".ln2.g", {cfg_.d}, group, InitKind::One);
        layer.ln2_b = make_param(name + ".ln2.b", {cfg_.d}, group, InitKind::Zero);
        return layer;
    }

    DecoderLayer make_decoder_layer(const std::string& name) {
        DecoderLayer layer;
        layer.self_attn = make_mha(name + ".self", ParamGroup::Rest);
        layer.ln1_g = make_param(name + ".ln1.g", {cfg_.d}, ParamGroup::Rest, InitKind::One);
        layer.ln1_b = make_param(name + ".ln1.b", {cfg_.d}, ParamGroup::Rest, InitKind::Zero);
        layer.cross_attn = make_mha(name + ".cross", ParamGroup::Rest);
        layer.ln2_g = make_param(name + ".ln2.g", {cfg_.d}, ParamGroup::Rest, InitKind::One);
        layer.ln2_b = make_param(name + ".ln2.b", {cfg_.d}, ParamGroup::Rest, InitKind::Zero);
        layer.ffn1 = make_linear(name + ".ffn1", cfg_.d, cfg_.ffn_dim(), ParamGroup::Rest);
        layer.ffn2 = make_linear(name + ".ffn2", cfg_.ffn_dim(), cfg_.d, ParamGroup::Rest);
        layer.ln3_g = make_param(name + ".ln3.g", {cfg_.d}, ParamGroup::Rest, InitKind::One);
        layer.ln3_b = make_param(name + ".ln3.b", {cfg_.d}, ParamGroup::Rest, InitKind::Zero);
        return layer;
    }

    Array<Real> apply_linear(const Linear& lin, const Array<Real>& x) const {
        return add_rowvec(matmul(x, lin.w), lin.b);
    }

    Array<Real> run_encoder_layer(const EncoderLayer& layer, Array<Real> x) const {
        auto res = attention(apply_linear(layer.attn.q, x), apply_linear(layer.attn.k, x),
                             apply_linear(layer.attn.v, x), cfg_.heads);
        x = layer_norm(add(x, apply_linear(layer.attn.o, res.output)), layer.ln1_g, layer.ln1_b);
        Array<Real> f = apply_linear(layer.ffn2, relu(apply_linear(layer.ffn1, x)));
        return layer_norm(add(x, f), layer.ln2_g, layer.ln2_b);
    }

    // Constant patch matrix [HW x patch_dim] for one frame of raw video.
    Array<Real> patches_of(std::span<const float> raw, int frame, int h, int w) const {
        const int ph = cfg_.patch_h(), pw = cfg_.patch_w(), c = cfg_.channels;
        Array<Real> patches({cfg_.num_patches(), cfg_.patch_dim()});
        auto o = patches.mutable_data();
        const std::size_t frame_off = static_cast<std::size_t>(frame) * h * w * c;
        std::size_t row = 0;
        for (int gy = 0; gy < cfg_.grid_h; ++gy)
            for (int gx = 0; gx < cfg_.grid_w; ++gx, ++row) {
                Real* dst = o.data() + row * static_cast<std::size_t>(cfg_.patch_dim());
                std::size_t k = 0;
                for (int py = 0; py < ph; ++py)
                    for (int px = 0; px < pw; ++px)
                        for (int ch = 0; ch < c; ++ch)
                            dst[k++] = static_cast<Real>(
                                raw[frame_off + ((static_cast<std::size_t>(gy * ph + py) * w) + (gx * pw + px)) * c +
                                    ch]);
            }
        return patches;
    }

    Array<Real> embed_frame(const Array<float>& video, int frame) const {
        Array<Real> patches = patches_of(video.data(), frame, cfg_.input_h, cfg_.input_w);
        return add(apply_linear(patch_proj_, patches), pos2d_);
    }

    // Crops run through the same patch backbone; off-size crops are first
    // nearest-neighbor resampled to the model input grid.
    Array<Real> embed_crop(const Array<float>& crop) const {
        if (crop.rank() != 3 || crop.dim(2) != cfg_.channels)
            throw ShapeError("visual query crop must be [H x W x c] with model channel count");
        const int ch = crop.dim(0), cw = crop.dim(1), c = cfg_.channels;
        Array<float> resized({1, cfg_.input_h, cfg_.input_w, c});
        auto o = resized.mutable_data();
        auto src = crop.data();
        for (int y = 0; y < cfg_.input_h; ++y) {
            const int sy = std::min(ch - 1, y * ch / cfg_.input_h);
            for (int x = 0; x < cfg_.input_w; ++x) {
                const int sx = std::min(cw - 1, x * cw / cfg_.input_w);
                for (int k = 0; k < c; ++k)
                    o[(static_cast<std::size_t>(y) * cfg_.input_w + x) * c + k] =
                        src[(static_cast<std::size_t>(sy) * cw + sx) * c + k];
            }
        }
        Array<Real> patches = patches_of(resized.data(), 0, cfg_.input_h, cfg_.input_w);
        return add(apply_linear(patch_proj_, patches), pos2d_);
    }

    ModelConfig cfg_;
    Rng rng_;
    std::vector<NamedParam<Real>> params_;
    std::unordered_map<std::string, std::size_t> index_;

    Linear patch_proj_;
    Array<Real> pos2d_;
    Array<Real> token_embed_;
    EncoderLayer text_layer_;
    Linear category_proj_;
    std::vector<EncoderLayer> encoder_;
    Array<Real> time_visual_;
    Array<Real> time_text_;
    std::vector<DecoderLayer> decoder_;
    Linear head_box1_, head_box2_, head_box3_;
    Linear head_start_, head_end_, head_fg_;
};

// Single-file checkpoint: magic, JSON manifest (names, shapes, byte offsets),
// then one little-endian float32 blob. Round-trips are bit-exact.
void save_checkpoint(const Model<float>& model, const std::string& path);
void load_checkpoint(Model<float>& model, const std::string& path);

}  // namespace vground
