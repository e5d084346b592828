// SPDX-License-Identifier: Apache-2.0

/// \file data.hpp
/// Synthetic multimodal tasks with a per-modality informativeness dial.
/// Classification plants class embeddings, regression plants a signed
/// direction; informativeness scales the planted signal against gaussian
/// noise, so a more informative modality is more linearly decodable and
/// joint training gravitates toward it.

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "cggm/nn.hpp"
#include "cggm/serialize.hpp"
#include "cggm/tensor.hpp"

namespace cggm {

struct SyntheticSpec {
    TaskKind task = TaskKind::classification;
    std::size_t classes = 2;                  // classification only
    std::size_t modalities = 2;
    std::vector<double> informativeness;      // s_i in [0, 1]
    std::vector<std::size_t> feature_dims;
    std::size_t samples = 200;
    double train_fraction = 0.8;
    double noise_sigma = 0.5;
    std::uint64_t seed = 0;

    void validate() const {
        if (task == TaskKind::classification && classes < 2)
            throw ConfigError("classification needs at least 2 classes");
        if (modalities < 1) throw ConfigError("modality count must be >= 1");
        if (informativeness.size() != modalities || feature_dims.size() != modalities)
            throw ConfigError("need one informativeness and one feature dim per modality");
        for (double s : informativeness)
            if (s < 0.0 || s > 1.0) throw ConfigError("informativeness must lie in [0, 1]");
        for (std::size_t d : feature_dims)
            if (d == 0) throw ConfigError("feature dimensions must be >= 1");
        if (samples < 2) throw ConfigError("need at least 2 samples");
        if (train_fraction <= 0.0 || train_fraction >= 1.0)
            throw ConfigError("train fraction must lie in (0, 1)");
        if (noise_sigma < 0.0) throw ConfigError("noise scale must be nonnegative");
    }
};

enum class Split : std::uint8_t { train = 0, test = 1 };

struct Dataset {
    SyntheticSpec spec;
    std::vector<std::vector<double>> features;  // per modality, samples x dim row-major
    std::vector<double> targets;                // class index or regression value
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> test_indices;

    const std::vector<std::size_t>& indices(Split split) const {
        return split == Split::train ? train_indices : test_indices;
    }
};

inline Dataset generate(const SyntheticSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    std::size_t n = spec.samples;
    std::size_t m = spec.modalities;

    // Planted structure is drawn once per spec seed.
    Rng structure_rng(mix_seed(spec.seed, 1));
    std::vector<std::vector<double>> embeddings(m);  // classes x dim, or 1 x dim direction
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t rows = spec.task == TaskKind::classification ? spec.classes : 1;
        embeddings[i].resize(rows * spec.feature_dims[i]);
        for (auto& v : embeddings[i]) v = structure_rng.gaussian();
    }

    Rng sample_rng(mix_seed(spec.seed, 2));
    ds.targets.resize(n);
    for (std::size_t s = 0; s < n; ++s) {
        if (spec.task == TaskKind::classification)
            ds.targets[s] = static_cast<double>(sample_rng.below(spec.classes));
        else
            ds.targets[s] = sample_rng.uniform(-3.0, 3.0);
    }

    Rng noise_rng(mix_seed(spec.seed, 3));
    ds.features.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t dim = spec.feature_dims[i];
        ds.features[i].resize(n * dim);
        for (std::size_t s = 0; s < n; ++s) {
            const double* base;
            double gain = spec.informativeness[i];
            if (spec.task == TaskKind::classification) {
                auto cls = static_cast<std::size_t>(ds.targets[s]);
                base = &embeddings[i][cls * dim];
            } else {
                base = &embeddings[i][0];
                gain *= ds.targets[s];
            }
            for (std::size_t f = 0; f < dim; ++f)
                ds.features[i][s * dim + f] =
                    gain * base[f] + spec.noise_sigma * noise_rng.gaussian();
        }
    }

    // Deterministic shuffled split: disjoint and exhaustive.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(mix_seed(spec.seed, 4));
    for (std::size_t i = n - 1; i > 0; --i)
        std::swap(order[i], order[split_rng.below(i + 1)]);
    auto train_count = static_cast<std::size_t>(static_cast<double>(n) * spec.train_fraction);
    train_count = std::min(std::max<std::size_t>(train_count, 1), n - 1);
    ds.train_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train_count));
    ds.test_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(train_count), order.end());
    return ds;
}

struct Batch {
    std::vector<Tensor> inputs;   // per modality, rows x dim
    std::vector<double> targets;
    std::size_t size = 0;
};

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> rows) {
    Batch b;
    b.size = rows.size();
    b.targets.reserve(rows.size());
    for (std::size_t r : rows) b.targets.push_back(ds.targets[r]);
    for (std::size_t i = 0; i < ds.spec.modalities; ++i) {
        std::size_t dim = ds.spec.feature_dims[i];
        std::vector<double> values;
        values.reserve(rows.size() * dim);
        for (std::size_t r : rows)
            values.insert(values.end(), ds.features[i].begin() + static_cast<std::ptrdiff_t>(r * dim),
                          ds.features[i].begin() + static_cast<std::ptrdiff_t>((r + 1) * dim));
        b.inputs.push_back(Tensor::from_values({rows.size(), dim}, std::move(values)));
    }
    return b;
}

/// Deterministic shuffled partition of a split; the final short batch is
/// included.
inline std::vector<Batch> batches(const Dataset& ds, Split split, std::size_t batch_size,
                                  std::uint64_t shuffle_seed) {
    if (batch_size == 0) throw ConfigError("batch size must be >= 1");
    std::vector<std::size_t> order = ds.indices(split);
    if (order.empty()) throw ConfigError("selected split is empty");
    Rng rng(shuffle_seed);
    for (std::size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[rng.below(i + 1)]);
    std::vector<Batch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::size_t count = std::min(batch_size, order.size() - start);
        out.push_back(make_batch(ds, std::span<const std::size_t>(order.data() + start, count)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset files: magic "CGGD", version u16, spec record, then per-modality
// matrices and targets as little-endian f64 with u32 shape prefixes.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kDatasetVersion = 1;

inline void save(const Dataset& ds, const std::string& path) {
    BinaryWriter w(path);
    w.magic("CGGD");
    w.u16(kDatasetVersion);
    w.u16(static_cast<std::uint16_t>(ds.spec.task));
    w.u32(static_cast<std::uint32_t>(ds.spec.classes));
    w.u32(static_cast<std::uint32_t>(ds.spec.modalities));
    for (double s : ds.spec.informativeness) w.f64(s);
    for (std::size_t d : ds.spec.feature_dims) w.u32(static_cast<std::uint32_t>(d));
    w.u32(static_cast<std::uint32_t>(ds.spec.samples));
    w.f64(ds.spec.train_fraction);
    w.f64(ds.spec.noise_sigma);
    w.u64(ds.spec.seed);
    for (std::size_t i = 0; i < ds.spec.modalities; ++i)
        w.shaped_f64({ds.spec.samples, ds.spec.feature_dims[i]}, ds.features[i]);
    w.shaped_f64({ds.spec.samples}, ds.targets);
    w.u32(static_cast<std::uint32_t>(ds.train_indices.size()));
    for (std::size_t idx : ds.train_indices) w.u32(static_cast<std::uint32_t>(idx));
    w.u32(static_cast<std::uint32_t>(ds.test_indices.size()));
    for (std::size_t idx : ds.test_indices) w.u32(static_cast<std::uint32_t>(idx));
    w.close();
}

inline Dataset load(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("CGGD");
    std::uint16_t version = r.u16();
    if (version != kDatasetVersion) throw UnsupportedVersionError(version, kDatasetVersion);
    Dataset ds;
    ds.spec.task = static_cast<TaskKind>(r.u16());
    ds.spec.classes = r.u32();
    ds.spec.modalities = r.u32();
    if (ds.spec.modalities == 0 || ds.spec.modalities > 64)
        throw ParseError("implausible modality count", r.offset());
    ds.spec.informativeness.resize(ds.spec.modalities);
    for (auto& s : ds.spec.informativeness) s = r.f64();
    ds.spec.feature_dims.resize(ds.spec.modalities);
    for (auto& d : ds.spec.feature_dims) d = r.u32();
    ds.spec.samples = r.u32();
    ds.spec.train_fraction = r.f64();
    ds.spec.noise_sigma = r.f64();
    ds.spec.seed = r.u64();
    ds.spec.validate();
    for (std::size_t i = 0; i < ds.spec.modalities; ++i) {
        auto [shape, values] = r.shaped_f64();
        if (shape != Shape{ds.spec.samples, ds.spec.feature_dims[i]})
            throw ParseError("feature matrix shape does not match spec", r.offset());
        ds.features.push_back(std::move(values));
    }
    auto [tshape, tvalues] = r.shaped_f64();
    if (tshape != Shape{ds.spec.samples})
        throw ParseError("target vector shape does not match spec", r.offset());
    ds.targets = std::move(tvalues);
    std::size_t train_count = r.u32();
    if (train_count > ds.spec.samples) throw ParseError("train split too large", r.offset());
    ds.train_indices.resize(train_count);
    for (auto& idx : ds.train_indices) idx = r.u32();
    std::size_t test_count = r.u32();
    if (train_count + test_count != ds.spec.samples)
        throw ParseError("splits are not exhaustive", r.offset());
    ds.test_indices.resize(test_count);
    for (auto& idx : ds.test_indices) idx = r.u32();
    return ds;
}

/// Restriction of a multimodal dataset to a single modality (unimodal runs).
inline Dataset restrict_to_modality(const Dataset& ds, std::size_t modality) {
    if (modality >= ds.spec.modalities) throw ConfigError("modality index out of range");
    Dataset out;
    out.spec = ds.spec;
    out.spec.modalities = 1;
    out.spec.informativeness = {ds.spec.informativeness[modality]};
    out.spec.feature_dims = {ds.spec.feature_dims[modality]};
    out.features = {ds.features[modality]};
    out.targets = ds.targets;
    out.train_indices = ds.train_indices;
    out.test_indices = ds.test_indices;
    return out;
}

}  // namespace cggm
