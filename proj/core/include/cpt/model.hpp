// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cpt/mixture.hpp"
#include "cpt/tensor.hpp"

namespace cpt::model {

enum class TowerId { image, text };

/// Linear encoder followed by elementwise scale/shift and L2 normalisation.
struct Tower {
    Matrix weight;  ///< d_emb x d_in
    Vector bias;    ///< d_emb
    Vector scale;   ///< d_emb
    Vector shift;   ///< d_emb

    std::size_t d_in() const { return weight.cols; }
    std::size_t d_emb() const { return weight.rows; }
    bool operator==(const Tower&) const = default;
};

/// Two towers plus the shared log-temperature.
struct ParamSet {
    Tower image;
    Tower text;
    double log_temperature = 0.0;

    /// Zero weights/biases/shifts, unit scales, temperature 1.
    static ParamSet zeros(std::size_t d_in, std::size_t d_emb);
    /// Same shapes, every entry zero (including log_temperature). Used for gradients.
    static ParamSet zeros_like(const ParamSet& p);

    double temperature() const;
    Tower& tower(TowerId id) { return id == TowerId::image ? image : text; }
    const Tower& tower(TowerId id) const { return id == TowerId::image ? image : text; }

    std::size_t size() const;
    bool same_shape(const ParamSet& o) const;
    bool operator==(const ParamSet&) const = default;
};

inline constexpr std::size_t kDefaultInputDim = 32;
inline constexpr std::size_t kDefaultEmbeddingDim = 16;
inline constexpr double kNormEpsilon = 1e-12;

/// Flat parameter names in flatten() order.
std::vector<std::string> parameter_names();
/// Offsets of each named tensor inside the flat vector.
struct TensorSlot {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};
std::vector<TensorSlot> layout(const ParamSet& p);

Vector flatten(const ParamSet& p);
void unflatten(std::span<const double> flat, ParamSet& p);

/// Embedding of raw features x: normalize(scale * (W x + b) + shift).
Vector encode(const ParamSet& p, TowerId tower, std::span<const double> x);

struct ClipLoss {
    double loss = 0.0;
    Vector per_sample;  ///< mean of the image->text and text->image cross-entropies per pair
};

/// Symmetric cross-entropy over the B x B cosine-similarity matrix divided by tau. Rows of
/// img/txt are unit embeddings. Optional outputs receive dL/d(img), dL/d(txt), dL/d(log tau).
ClipLoss clip_loss(const Matrix& img, const Matrix& txt, double tau, Matrix* d_img = nullptr,
                   Matrix* d_txt = nullptr, double* d_log_tau = nullptr);

using BatchView = std::span<const mixture::Sample* const>;

/// Contrastive loss of a batch; when grad is non-null it receives the exact gradient
/// w.r.t. every entry of p (grad is resized to p's shape).
ClipLoss loss_and_grad(const ParamSet& p, BatchView batch, ParamSet* grad = nullptr);

/// AdamW state over a flat vector of trainable scalars.
struct OptimizerState {
    Vector first_moment;
    Vector second_moment;
    std::int64_t step = 0;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void reset(std::size_t n);
};

/// Scales grads in place so their global L2 norm is at most clip_norm; returns the pre-clip norm.
double clip_global_norm(std::span<double> grads, double clip_norm);

/// Global-norm clipping then one AdamW update. decay_mask[i] selects decoupled weight decay
/// for entry i (empty mask: decay everything). Returns the pre-clip gradient norm.
double optimizer_step(std::span<double> params, std::span<double> grads, OptimizerState& state, double lr,
                      double clip_norm, std::span<const char> decay_mask = {});

/// Fraction of samples whose image embedding is closest (cosine) to its own concept's
/// prototype text embedding. Ties resolve to the lower concept id.
double zero_shot_eval(const ParamSet& p, const std::map<streams::ConceptId, Vector>& prototypes,
                      std::span<const mixture::Sample> samples);

/// Per-concept (correct, total) counts for the same protocol.
std::map<streams::ConceptId, std::pair<std::size_t, std::size_t>> zero_shot_counts(
    const ParamSet& p, const std::map<streams::ConceptId, Vector>& prototypes,
    std::span<const mixture::Sample> samples);

/// tau <- max(tau, min_tau) when enabled.
void clamp_temperature(ParamSet& p, double min_tau = 0.01, bool enabled = true);

/// Flat named tensor as stored in checkpoints.
struct TensorRecord {
    std::string name;
    std::vector<std::uint64_t> shape;
    std::vector<double> values;
    bool operator==(const TensorRecord&) const = default;
};

std::vector<TensorRecord> to_records(const ParamSet& p);
ParamSet from_records(const std::vector<TensorRecord>& records);

/// Binary layout: "CPTCKPT1", u64 count, then per tensor u32 name length, name bytes,
/// u32 rank, u64 dims, f64 values (row-major). All integers and doubles little-endian.
void save_checkpoint(const std::filesystem::path& path, const std::vector<TensorRecord>& records);
std::vector<TensorRecord> load_checkpoint(const std::filesystem::path& path);

}  // namespace cpt::model
