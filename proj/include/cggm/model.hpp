// SPDX-License-Identifier: Apache-2.0

/// \file model.hpp
/// The late-fusion multimodal assembly: per-modality encoders, a fusion MLP
/// over the concatenated representations, a final affine prediction head, and
/// per-modality auxiliary classifiers fed detached representations (used only
/// during training; they never backpropagate into the encoders).

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cggm/nn.hpp"
#include "cggm/serialize.hpp"
#include "cggm/tensor.hpp"

namespace cggm {

enum class EncoderKind : std::uint8_t { mlp = 0, attention = 1 };

/// Scope of the closed-form gradients entering the direction loss. Only the
/// final affine layer of each head is implemented; the switch is reserved.
enum class DirectionGradScope : std::uint8_t { final_layer = 0 };

struct ModelConfig {
    std::size_t modalities = 2;             // M
    std::vector<std::size_t> input_dims;    // one per modality
    std::size_t hidden_dim = 16;            // d
    std::size_t encoder_depth = 2;          // affine+gelu layers per encoder
    EncoderKind encoder_kind = EncoderKind::mlp;
    std::size_t fusion_depth = 1;
    std::size_t classifier_attn_layers = 1; // 1 or 2
    std::size_t attn_tokens = 4;            // token view of the hidden vector
    std::size_t attn_heads = 1;
    std::size_t output_dim = 2;             // classes, or 1 for regression
    TaskKind task = TaskKind::classification;
    std::uint64_t seed = 0;

    void validate() const {
        if (modalities < 1) throw ConfigError("modality count must be >= 1");
        if (input_dims.size() != modalities)
            throw ConfigError("need one input dimension per modality");
        for (std::size_t d : input_dims)
            if (d == 0) throw ConfigError("input dimensions must be >= 1");
        if (hidden_dim == 0 || output_dim == 0 || encoder_depth == 0 || fusion_depth == 0)
            throw ConfigError("model dimensions and depths must be >= 1");
        if (classifier_attn_layers < 1 || classifier_attn_layers > 2)
            throw ConfigError("classifier attention layer count must be 1 or 2");
        if (attn_tokens == 0 || hidden_dim % attn_tokens != 0)
            throw ConfigError("attention tokens must divide the hidden dimension");
        if (attn_heads == 0 || (hidden_dim / attn_tokens) % attn_heads != 0)
            throw ConfigError("attention heads must divide the token width");
        if (task == TaskKind::regression && output_dim != 1)
            throw ConfigError("regression requires output dimension 1");
        if (task == TaskKind::classification && output_dim < 2)
            throw ConfigError("classification requires at least 2 classes");
    }
};

/// One named parameter group; every model parameter belongs to exactly one.
struct ParamGroup {
    std::string name;
    std::vector<Tensor> params;
};

struct Encoder {
    EncoderKind kind = EncoderKind::mlp;
    Mlp mlp;                 // used when kind == mlp
    Affine input_proj;       // used when kind == attention
    AttentionBlock block;    // used when kind == attention

    Tensor forward(const Tensor& x) const {
        if (kind == EncoderKind::mlp) return mlp.forward(x);
        return block.forward(gelu(input_proj.forward(x)));
    }

    std::vector<Tensor> params() const {
        if (kind == EncoderKind::mlp) return mlp.params();
        std::vector<Tensor> out = input_proj.params();
        for (const auto& p : block.params()) out.push_back(p);
        return out;
    }
};

struct Classifier {
    std::vector<AttentionBlock> attn;
    Affine out;

    /// Returns {final-layer input, logits}; the caller supplies a detached h.
    std::pair<Tensor, Tensor> forward(const Tensor& h) const {
        Tensor z = h;
        for (const auto& block : attn) z = block.forward(z);
        return {z, out.forward(z)};
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> ps;
        for (const auto& block : attn)
            for (const auto& p : block.params()) ps.push_back(p);
        for (const auto& p : out.params()) ps.push_back(p);
        return ps;
    }
};

class MultimodalModel {
public:
    static MultimodalModel build(const ModelConfig& cfg) {
        cfg.validate();
        MultimodalModel m;
        m.cfg_ = cfg;
        for (std::size_t i = 0; i < cfg.modalities; ++i) {
            Encoder enc;
            enc.kind = cfg.encoder_kind;
            std::uint64_t seed = mix_seed(cfg.seed, 100 + i);
            if (cfg.encoder_kind == EncoderKind::mlp) {
                enc.mlp = Mlp::init(cfg.input_dims[i], cfg.hidden_dim, cfg.encoder_depth, seed);
            } else {
                enc.input_proj =
                    Affine::init(cfg.input_dims[i], cfg.hidden_dim, mix_seed(seed, 0));
                enc.block = AttentionBlock::init(cfg.hidden_dim, cfg.attn_tokens, cfg.attn_heads,
                                                 mix_seed(seed, 1));
            }
            m.encoders_.push_back(std::move(enc));
        }
        m.fusion_ = Mlp::init(cfg.modalities * cfg.hidden_dim, cfg.hidden_dim, cfg.fusion_depth,
                              mix_seed(cfg.seed, 200));
        m.head_ = Affine::init(cfg.hidden_dim, cfg.output_dim, mix_seed(cfg.seed, 300));
        for (std::size_t i = 0; i < cfg.modalities; ++i) {
            Classifier cls;
            for (std::size_t l = 0; l < cfg.classifier_attn_layers; ++l)
                cls.attn.push_back(AttentionBlock::init(cfg.hidden_dim, cfg.attn_tokens,
                                                        cfg.attn_heads,
                                                        mix_seed(cfg.seed, 400 + 10 * i + l)));
            cls.out = Affine::init(cfg.hidden_dim, cfg.output_dim, mix_seed(cfg.seed, 500 + i));
            m.classifiers_.push_back(std::move(cls));
        }
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    std::size_t modalities() const { return cfg_.modalities; }
    const Affine& head() const { return head_; }
    const Classifier& classifier(std::size_t i) const { return classifiers_.at(i); }

    /// h_i = phi_i(x_i); representations stay on the graph.
    std::vector<Tensor> forward_encoders(const std::vector<Tensor>& batch) const {
        if (batch.size() != cfg_.modalities)
            throw ConfigError("batch has " + std::to_string(batch.size()) + " modalities, model has " +
                              std::to_string(cfg_.modalities));
        std::size_t rows = batch[0].shape()[0];
        std::vector<Tensor> hs;
        hs.reserve(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            if (batch[i].rank() != 2 || batch[i].shape()[0] != rows ||
                batch[i].shape()[1] != cfg_.input_dims[i])
                throw ConfigError("modality " + std::to_string(i + 1) + " input shape " +
                                  shape_str(batch[i].shape()) + " does not match config");
            hs.push_back(encoders_[i].forward(batch[i]));
        }
        return hs;
    }

    /// h_F = fusion(concat h_i), prediction = head(h_F) (final affine map).
    std::pair<Tensor, Tensor> forward_fusion(const std::vector<Tensor>& hs) const {
        Tensor fused_in = hs.size() == 1 ? hs[0] : concat_last(hs);
        Tensor h_fused = fusion_.forward(fused_in);
        return {h_fused, head_.forward(h_fused)};
    }

    struct ClassifierOutput {
        Tensor final_input;  // input of the classifier's final affine layer
        Tensor prediction;
    };

    /// Classifier predictions from detached representations; classifier
    /// losses therefore update classifier parameters only.
    std::vector<ClassifierOutput> forward_classifiers(const std::vector<Tensor>& hs) const {
        if (hs.size() != cfg_.modalities)
            throw ConfigError("representation count does not match modality count");
        std::vector<ClassifierOutput> out;
        out.reserve(hs.size());
        for (std::size_t i = 0; i < hs.size(); ++i) {
            auto [z, logits] = classifiers_[i].forward(hs[i].detach());
            out.push_back({z, logits});
        }
        return out;
    }

    /// Parameter groups in fixed declaration order: encoder_1..M, fusion,
    /// head, classifier_1..M.
    std::vector<ParamGroup> groups() const {
        std::vector<ParamGroup> gs;
        for (std::size_t i = 0; i < encoders_.size(); ++i)
            gs.push_back({"encoder_" + std::to_string(i + 1), encoders_[i].params()});
        gs.push_back({"fusion", fusion_.params()});
        gs.push_back({"head", head_.params()});
        for (std::size_t i = 0; i < classifiers_.size(); ++i)
            gs.push_back({"classifier_" + std::to_string(i + 1), classifiers_[i].params()});
        return gs;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> ps;
        for (const auto& g : groups())
            for (const auto& p : g.params) ps.push_back(p);
        return ps;
    }

    // ------------------------------------------------------------------
    // Checkpoint format: magic "CGGM", version u16, config record, then
    // parameter groups in declaration order with shape prefixes.
    // ------------------------------------------------------------------

    static constexpr std::uint16_t kCheckpointVersion = 1;

    void save(const std::string& path) const {
        BinaryWriter w(path);
        w.magic("CGGM");
        w.u16(kCheckpointVersion);
        w.u32(static_cast<std::uint32_t>(cfg_.modalities));
        for (std::size_t d : cfg_.input_dims) w.u32(static_cast<std::uint32_t>(d));
        w.u32(static_cast<std::uint32_t>(cfg_.hidden_dim));
        w.u32(static_cast<std::uint32_t>(cfg_.encoder_depth));
        w.u16(static_cast<std::uint16_t>(cfg_.encoder_kind));
        w.u32(static_cast<std::uint32_t>(cfg_.fusion_depth));
        w.u32(static_cast<std::uint32_t>(cfg_.classifier_attn_layers));
        w.u32(static_cast<std::uint32_t>(cfg_.attn_tokens));
        w.u32(static_cast<std::uint32_t>(cfg_.attn_heads));
        w.u32(static_cast<std::uint32_t>(cfg_.output_dim));
        w.u16(static_cast<std::uint16_t>(cfg_.task));
        w.u64(cfg_.seed);
        for (const auto& g : groups())
            for (const auto& p : g.params) w.shaped_f64(p.shape(), p.values());
        w.close();
    }

    static MultimodalModel load(const std::string& path) {
        BinaryReader r(path);
        r.expect_magic("CGGM");
        std::uint16_t version = r.u16();
        if (version != kCheckpointVersion)
            throw UnsupportedVersionError(version, kCheckpointVersion);
        ModelConfig cfg;
        cfg.modalities = r.u32();
        if (cfg.modalities == 0 || cfg.modalities > 64)
            throw ParseError("implausible modality count", r.offset());
        cfg.input_dims.resize(cfg.modalities);
        for (auto& d : cfg.input_dims) d = r.u32();
        cfg.hidden_dim = r.u32();
        cfg.encoder_depth = r.u32();
        cfg.encoder_kind = static_cast<EncoderKind>(r.u16());
        cfg.fusion_depth = r.u32();
        cfg.classifier_attn_layers = r.u32();
        cfg.attn_tokens = r.u32();
        cfg.attn_heads = r.u32();
        cfg.output_dim = r.u32();
        cfg.task = static_cast<TaskKind>(r.u16());
        cfg.seed = r.u64();
        MultimodalModel m = build(cfg);
        for (auto& g : m.groups())
            for (auto& p : g.params) {
                auto [shape, values] = r.shaped_f64();
                if (shape != p.shape())
                    throw ParseError("stored parameter shape " + shape_str(shape) +
                                         " does not match model shape " + shape_str(p.shape()),
                                     r.offset());
                Tensor q = p;  // shared node: overwrite leaf values in place
                q.mutable_values() = std::move(values);
            }
        return m;
    }

private:
    ModelConfig cfg_;
    std::vector<Encoder> encoders_;
    Mlp fusion_;
    Affine head_;
    std::vector<Classifier> classifiers_;
};

// ---------------------------------------------------------------------------
// Closed-form final-layer gradients.
// ---------------------------------------------------------------------------

/// Output-side residual dL/dy for the configured task loss.
inline Tensor loss_residual(TaskKind task, const Tensor& predictions,
                            const std::vector<double>& targets) {
    switch (task) {
        case TaskKind::classification: {
            std::vector<std::size_t> cls(targets.size());
            for (std::size_t i = 0; i < targets.size(); ++i)
                cls[i] = static_cast<std::size_t>(targets[i]);
            return cross_entropy_residual(predictions, cls);
        }
        case TaskKind::regression:
            return l1_residual(predictions, targets);
    }
    throw UnsupportedLossError("unsupported loss kind");
}

inline Tensor task_loss(TaskKind task, const Tensor& predictions,
                        const std::vector<double>& targets) {
    switch (task) {
        case TaskKind::classification: {
            std::vector<std::size_t> cls(targets.size());
            for (std::size_t i = 0; i < targets.size(); ++i)
                cls[i] = static_cast<std::size_t>(targets[i]);
            return cross_entropy(predictions, cls);
        }
        case TaskKind::regression:
            return l1_loss(predictions, targets);
    }
    throw UnsupportedLossError("unsupported loss kind");
}

/// Gradient of the loss with respect to a final affine layer, as a graph
/// node: flatten(h^T . dLdy) with the bias gradient (column sums of dLdy)
/// appended, covering the whole layer in one vector of length d*m + m.
inline Tensor head_gradient(const Tensor& final_input, const Tensor& dLdy) {
    if (final_input.rank() != 2 || dLdy.rank() != 2 ||
        final_input.shape()[0] != dLdy.shape()[0])
        throw ShapeError("head_gradient expects batch-aligned rank-2 inputs");
    Tensor weight_grad = matmul(transpose(final_input), dLdy);  // d x m
    Tensor ones_row = Tensor::ones({1, dLdy.shape()[0]});
    Tensor bias_grad = matmul(ones_row, dLdy);  // 1 x m column sums
    return concat_last({flatten(weight_grad), flatten(bias_grad)});
}

}  // namespace cggm
