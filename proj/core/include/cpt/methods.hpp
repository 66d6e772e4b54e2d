// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cpt/model.hpp"
#include "cpt/rng.hpp"

namespace cpt::methods {

enum class MethodKind {
    full_ft,
    locked_image,
    locked_text,
    lora,
    vera,
    dora,
    bitfit,
    lnfit,
    ewc,
    si,
    merge_ema,
    merge_ft,
    merge_zs,
};

inline constexpr MethodKind kAllMethods[] = {
    MethodKind::full_ft, MethodKind::locked_image, MethodKind::locked_text, MethodKind::lora,
    MethodKind::vera,    MethodKind::dora,         MethodKind::bitfit,      MethodKind::lnfit,
    MethodKind::ewc,     MethodKind::si,           MethodKind::merge_ema,   MethodKind::merge_ft,
    MethodKind::merge_zs};

MethodKind parse_method(std::string_view name);
std::string_view to_string(MethodKind kind);

bool is_low_rank(MethodKind kind);
bool is_merge(MethodKind kind);

struct MethodConfig {
    MethodKind kind = MethodKind::full_ft;
    std::size_t rank = 4;
    double ewc_lambda = 100.0;
    std::size_t fisher_batches = 10;
    double si_c = 0.1;
    double si_zeta = 0.1;
    double merge_w = 0.9;
    double vera_rank_scale_init = 0.1;

    /// Throws std::invalid_argument on rank < 1 (low-rank kinds), w outside (0, 1), zeta <= 0,
    /// negative penalty weights or zero fisher batches.
    void validate() const;
    /// Name of the matching cost-table row, e.g. "lora-r4" or "merge-ema".
    std::string cost_row() const;
};

/// Low-rank factors of one tower. Unused members stay empty for a given kind.
struct Adapter {
    Matrix up;         ///< B, d_emb x r
    Matrix down;       ///< A, r x d_in
    Vector magnitude;  ///< DoRA m, one entry per input column
    Vector out_scale;  ///< VeRA Lambda_B, d_emb
    Vector rank_scale; ///< VeRA Lambda_A, r

    std::size_t size() const;
    bool operator==(const Adapter&) const = default;
};

struct AdapterPair {
    Adapter image;
    Adapter text;
    Adapter& tower(model::TowerId id) { return id == model::TowerId::image ? image : text; }
    const Adapter& tower(model::TowerId id) const { return id == model::TowerId::image ? image : text; }
    bool operator==(const AdapterPair&) const = default;
};

/// What the optimiser sees: base parameters (W0 for low-rank kinds) plus adapter factors.
struct TrainState {
    model::ParamSet params;
    AdapterPair adapters;

    std::size_t size() const { return params.size() + adapters.image.size() + adapters.text.size(); }
    bool operator==(const TrainState&) const = default;
};

/// Flat layout: flatten(params) followed by image then text adapter members in declaration order.
Vector flatten(const TrainState& s);
void unflatten(std::span<const double> flat, TrainState& s);

/// Fresh adapter for `kind` on top of base weight W0 (B = 0 start, so the effective weight is W0).
Adapter init_adapter(const MethodConfig& cfg, const Matrix& w0, Rng& rng);
AdapterPair init_adapters(const MethodConfig& cfg, const model::ParamSet& base, Rng& rng);

/// W' for the kind: LoRA W0 + BA, VeRA W0 + diag(Lb) B diag(La) A, DoRA m * V / ||V||_col with
/// V = W0 + BA; every other kind returns W0.
Matrix effective_weight(MethodKind kind, const Matrix& w0, const Adapter& adapter);

/// Parameters the model actually evaluates for a training state.
model::ParamSet effective_params(MethodKind kind, const TrainState& s);

/// Chain rule from dL/dW' into the adapter factors (accumulates into grad).
void adapter_backward(MethodKind kind, const Matrix& w0, const Adapter& adapter, const Matrix& d_weight,
                      Adapter& grad);

/// Per-entry trainability over the TrainState flat layout. Temperature is always trainable.
std::vector<char> trainable_mask(MethodKind kind, const TrainState& s);
/// Per-entry weight-decay selection (trainable entries except log-temperature).
std::vector<char> decay_mask(MethodKind kind, const TrainState& s);

/// (lambda / 2) * sum_k F_k (theta_k - anchor_k)^2
double ewc_penalty(std::span<const double> theta, std::span<const double> anchor, std::span<const double> fisher,
                   double lambda);

struct EwcState {
    Vector anchor;
    Vector fisher;
    bool active() const { return !anchor.empty(); }
};

/// Mean of elementwise squared batch gradients (flat ParamSet layout) over fisher_batches
/// batches drawn uniformly from pool.
Vector estimate_fisher(const model::ParamSet& params, const mixture::Pool& pool, std::size_t fisher_batches,
                       std::size_t batch_size, Rng& rng);
/// Rolling average across tasks: F <- (F_old + F_new) / 2, or F_new when there is no history.
void update_fisher(EwcState& state, const Vector& fisher_new, const Vector& anchor);

struct SiState {
    Vector omega;       ///< running -g * delta sum over the current task
    Vector task_start;  ///< parameters at the start of the current task
    Vector importance;  ///< sum over past tasks of omega / (delta^2 + zeta)
    Vector anchor;      ///< parameters at the end of the previous task
    bool has_history() const { return !anchor.empty(); }
};

void si_begin_task(SiState& s, std::span<const double> params);
/// omega_k += -g_k * delta_k
void si_accumulate(SiState& s, std::span<const double> grads, std::span<const double> param_delta);
/// Folds the task's omega into the importance and records the anchor.
void si_end_task(SiState& s, std::span<const double> params, double zeta);
/// c * sum_k importance_k * (anchor_k - theta_k)^2; zero without history.
double si_penalty(std::span<const double> theta, const SiState& s, double c);

/// Interpolation at a task boundary. EMA/ZS: w * prev + (1 - w) * tuned; FT: w * theta0 + (1 - w) * tuned.
model::ParamSet merge_end_of_task(MethodKind kind, const model::ParamSet& theta0, const model::ParamSet& prev,
                                  const model::ParamSet& tuned, double w);

/// Folds adapters into the base weights and draws fresh factors for the next task.
void absorb_adapters(const MethodConfig& cfg, TrainState& s, Rng& rng);

/// Everything a method carries across tasks besides the trained parameters.
struct MethodState {
    EwcState ewc;
    SiState si;
};

struct Objective {
    double total = 0.0;
    double contrastive = 0.0;
    double penalty = 0.0;
    Vector grad;            ///< TrainState layout, zero where frozen
    Vector contrastive_grad;///< ParamSet layout, contrastive part only (filled for SI)
    model::ClipLoss clip;
};

/// Contrastive loss of the effective model plus active penalties, with the exact gradient
/// over the trainable entries of the TrainState flat layout.
Objective compute_objective(const MethodConfig& cfg, const MethodState& ms, const TrainState& s,
                            model::BatchView batch, bool with_grad = true);

}  // namespace cpt::methods
