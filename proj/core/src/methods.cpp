// SPDX-License-Identifier: Apache-2.0
#include "cpt/methods.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cpt::methods {

namespace {

using model::ParamSet;
using model::TowerId;

void append(Vector& out, std::span<const double> v) { out.insert(out.end(), v.begin(), v.end()); }

Matrix kaiming_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix m(rows, cols);
    for (auto& v : m.data) v = u(rng);
    return m;
}

Vector column_norms(const Matrix& m) {
    Vector norms(m.cols, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) norms[j] += m(i, j) * m(i, j);
    for (auto& n : norms) n = std::sqrt(n);
    return norms;
}

Matrix vera_delta(const Adapter& a) {
    Matrix scaled_up = a.up;
    for (std::size_t i = 0; i < scaled_up.rows; ++i)
        for (std::size_t k = 0; k < scaled_up.cols; ++k) scaled_up(i, k) *= a.out_scale[i] * a.rank_scale[k];
    return matmul(scaled_up, a.down);
}

Adapter zeros_like(const Adapter& a) {
    Adapter z;
    z.up = Matrix(a.up.rows, a.up.cols);
    z.down = Matrix(a.down.rows, a.down.cols);
    z.magnitude.assign(a.magnitude.size(), 0.0);
    z.out_scale.assign(a.out_scale.size(), 0.0);
    z.rank_scale.assign(a.rank_scale.size(), 0.0);
    return z;
}

void flatten_adapter(const Adapter& a, Vector& out) {
    append(out, a.up.data);
    append(out, a.down.data);
    append(out, a.magnitude);
    append(out, a.out_scale);
    append(out, a.rank_scale);
}

void check_same(std::span<const double> a, std::span<const double> b, const char* what) {
    if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

// Mask helper over the flat ParamSet prefix.
void mark(std::vector<char>& mask, const ParamSet& p, auto&& predicate) {
    for (const auto& slot : model::layout(p))
        if (predicate(slot.name))
            std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(slot.offset), slot.size, char{1});
}

}  // namespace

MethodKind parse_method(std::string_view name) {
    for (auto k : kAllMethods)
        if (to_string(k) == name) return k;
    throw std::invalid_argument("unknown method '" + std::string(name) + "'");
}

std::string_view to_string(MethodKind kind) {
    switch (kind) {
        case MethodKind::full_ft: return "full-ft";
        case MethodKind::locked_image: return "locked-image";
        case MethodKind::locked_text: return "locked-text";
        case MethodKind::lora: return "lora";
        case MethodKind::vera: return "vera";
        case MethodKind::dora: return "dora";
        case MethodKind::bitfit: return "bitfit";
        case MethodKind::lnfit: return "lnfit";
        case MethodKind::ewc: return "ewc";
        case MethodKind::si: return "si";
        case MethodKind::merge_ema: return "merge-ema";
        case MethodKind::merge_ft: return "merge-ft";
        case MethodKind::merge_zs: return "merge-zs";
    }
    throw std::invalid_argument("unknown method kind");
}

bool is_low_rank(MethodKind kind) {
    return kind == MethodKind::lora || kind == MethodKind::vera || kind == MethodKind::dora;
}

bool is_merge(MethodKind kind) {
    return kind == MethodKind::merge_ema || kind == MethodKind::merge_ft || kind == MethodKind::merge_zs;
}

void MethodConfig::validate() const {
    if (is_low_rank(kind) && rank < 1) throw std::invalid_argument("method.rank must be >= 1");
    if (is_merge(kind) && !(merge_w > 0.0 && merge_w < 1.0)) throw std::invalid_argument("method.merge_w must lie in (0, 1)");
    if (!(si_zeta > 0.0)) throw std::invalid_argument("method.si_zeta must be positive");
    if (ewc_lambda < 0.0) throw std::invalid_argument("method.ewc_lambda must be non-negative");
    if (si_c < 0.0) throw std::invalid_argument("method.si_c must be non-negative");
    if (fisher_batches < 1) throw std::invalid_argument("method.fisher_batches must be >= 1");
}

std::string MethodConfig::cost_row() const {
    if (is_low_rank(kind)) return std::string(to_string(kind)) + "-r" + std::to_string(rank);
    return std::string(to_string(kind));
}

std::size_t Adapter::size() const {
    return up.data.size() + down.data.size() + magnitude.size() + out_scale.size() + rank_scale.size();
}

Vector flatten(const TrainState& s) {
    Vector flat = model::flatten(s.params);
    flatten_adapter(s.adapters.image, flat);
    flatten_adapter(s.adapters.text, flat);
    return flat;
}

void unflatten(std::span<const double> flat, TrainState& s) {
    if (flat.size() != s.size()) throw std::invalid_argument("flat training state has the wrong size");
    const std::size_t np = s.params.size();
    model::unflatten(flat.first(np), s.params);
    auto it = flat.begin() + static_cast<std::ptrdiff_t>(np);
    auto take = [&](std::span<double> dst) {
        std::copy(it, it + static_cast<std::ptrdiff_t>(dst.size()), dst.begin());
        it += static_cast<std::ptrdiff_t>(dst.size());
    };
    for (auto* a : {&s.adapters.image, &s.adapters.text}) {
        take(a->up.data);
        take(a->down.data);
        take(a->magnitude);
        take(a->out_scale);
        take(a->rank_scale);
    }
}

Adapter init_adapter(const MethodConfig& cfg, const Matrix& w0, Rng& rng) {
    Adapter a;
    const std::size_t r = cfg.rank;
    switch (cfg.kind) {
        case MethodKind::lora:
            a.up = Matrix(w0.rows, r);
            a.down = kaiming_uniform(r, w0.cols, rng);
            break;
        case MethodKind::dora:
            a.up = Matrix(w0.rows, r);
            a.down = kaiming_uniform(r, w0.cols, rng);
            a.magnitude = column_norms(w0);
            break;
        case MethodKind::vera:
            a.up = kaiming_uniform(w0.rows, r, rng);
            a.down = kaiming_uniform(r, w0.cols, rng);
            a.out_scale.assign(w0.rows, 0.0);
            a.rank_scale.assign(r, cfg.vera_rank_scale_init);
            break;
        default: break;
    }
    return a;
}

AdapterPair init_adapters(const MethodConfig& cfg, const model::ParamSet& base, Rng& rng) {
    AdapterPair p;
    p.image = init_adapter(cfg, base.image.weight, rng);
    p.text = init_adapter(cfg, base.text.weight, rng);
    return p;
}

Matrix effective_weight(MethodKind kind, const Matrix& w0, const Adapter& a) {
    switch (kind) {
        case MethodKind::lora:
        case MethodKind::dora: {
            if (a.up.rows != w0.rows || a.down.cols != w0.cols || a.up.cols != a.down.rows)
                throw std::invalid_argument("adapter factors do not match the base weight");
            Matrix w = matmul(a.up, a.down);
            for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] += w0.data[i];
            if (kind == MethodKind::lora) return w;
            if (a.magnitude.size() != w.cols) throw std::invalid_argument("DoRA magnitude does not match columns");
            const Vector norms = column_norms(w);
            for (std::size_t i = 0; i < w.rows; ++i)
                for (std::size_t j = 0; j < w.cols; ++j)
                    w(i, j) *= a.magnitude[j] / std::max(norms[j], model::kNormEpsilon);
            return w;
        }
        case MethodKind::vera: {
            if (a.up.rows != w0.rows || a.down.cols != w0.cols || a.out_scale.size() != w0.rows ||
                a.rank_scale.size() != a.up.cols)
                throw std::invalid_argument("adapter factors do not match the base weight");
            Matrix w = vera_delta(a);
            for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] += w0.data[i];
            return w;
        }
        default: return w0;
    }
}

model::ParamSet effective_params(MethodKind kind, const TrainState& s) {
    if (!is_low_rank(kind)) return s.params;
    model::ParamSet p = s.params;
    p.image.weight = effective_weight(kind, s.params.image.weight, s.adapters.image);
    p.text.weight = effective_weight(kind, s.params.text.weight, s.adapters.text);
    return p;
}

void adapter_backward(MethodKind kind, const Matrix& w0, const Adapter& a, const Matrix& g, Adapter& grad) {
    auto accumulate = [](Matrix& dst, const Matrix& src) {
        for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
    };
    switch (kind) {
        case MethodKind::lora:
            accumulate(grad.up, matmul(g, transpose(a.down)));
            accumulate(grad.down, matmul(transpose(a.up), g));
            break;
        case MethodKind::vera: {
            const Matrix m = [&] {
                Matrix scaled = a.up;
                for (std::size_t i = 0; i < scaled.rows; ++i)
                    for (std::size_t k = 0; k < scaled.cols; ++k) scaled(i, k) *= a.rank_scale[k];
                return matmul(scaled, a.down);
            }();
            for (std::size_t i = 0; i < g.rows; ++i) grad.out_scale[i] += dot(g.row(i), m.row(i));
            Matrix h = g;
            for (std::size_t i = 0; i < h.rows; ++i)
                for (auto& v : h.row(i)) v *= a.out_scale[i];
            const Matrix uh = matmul(transpose(a.up), matmul(h, transpose(a.down)));  // r x r
            for (std::size_t k = 0; k < a.rank_scale.size(); ++k) grad.rank_scale[k] += uh(k, k);
            break;
        }
        case MethodKind::dora: {
            Matrix v = matmul(a.up, a.down);
            for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] += w0.data[i];
            const Vector norms = column_norms(v);
            Matrix dv(v.rows, v.cols);
            for (std::size_t j = 0; j < v.cols; ++j) {
                const double c = std::max(norms[j], model::kNormEpsilon);
                double gv = 0.0;  // sum_i G_ij * Vhat_ij
                for (std::size_t i = 0; i < v.rows; ++i) gv += g(i, j) * v(i, j) / c;
                grad.magnitude[j] += gv;
                for (std::size_t i = 0; i < v.rows; ++i)
                    dv(i, j) = a.magnitude[j] / c * (g(i, j) - v(i, j) / c * gv);
            }
            accumulate(grad.up, matmul(dv, transpose(a.down)));
            accumulate(grad.down, matmul(transpose(a.up), dv));
            break;
        }
        default: throw std::logic_error("adapter_backward called for a method without adapters");
    }
}

std::vector<char> trainable_mask(MethodKind kind, const TrainState& s) {
    std::vector<char> mask(s.size(), 0);
    const auto& p = s.params;
    auto starts_with = [](const std::string& name, std::string_view prefix) { return name.starts_with(prefix); };
    auto ends_with = [](const std::string& name, std::string_view suffix) { return name.ends_with(suffix); };
    switch (kind) {
        case MethodKind::full_ft:
        case MethodKind::ewc:
        case MethodKind::si:
        case MethodKind::merge_ema:
        case MethodKind::merge_ft:
        case MethodKind::merge_zs: mark(mask, p, [](const std::string&) { return true; }); break;
        case MethodKind::locked_image:
            mark(mask, p, [&](const std::string& n) { return !starts_with(n, "image."); });
            break;
        case MethodKind::locked_text:
            mark(mask, p, [&](const std::string& n) { return !starts_with(n, "text."); });
            break;
        case MethodKind::bitfit: mark(mask, p, [&](const std::string& n) { return ends_with(n, ".bias"); }); break;
        case MethodKind::lnfit:
            mark(mask, p, [&](const std::string& n) { return ends_with(n, ".scale") || ends_with(n, ".shift"); });
            break;
        case MethodKind::lora:
        case MethodKind::dora:
        case MethodKind::vera: {
            std::size_t offset = p.size();
            for (const auto* a : {&s.adapters.image, &s.adapters.text}) {
                const bool factors = kind != MethodKind::vera;
                const std::size_t sizes[] = {a->up.data.size(), a->down.data.size(), a->magnitude.size(),
                                             a->out_scale.size(), a->rank_scale.size()};
                const bool train[] = {factors, factors, true, true, true};
                for (std::size_t m = 0; m < 5; ++m) {
                    if (train[m]) std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(offset), sizes[m], char{1});
                    offset += sizes[m];
                }
            }
            break;
        }
    }
    mask[p.size() - 1] = 1;  // log-temperature
    return mask;
}

std::vector<char> decay_mask(MethodKind kind, const TrainState& s) {
    auto mask = trainable_mask(kind, s);
    mask[s.params.size() - 1] = 0;
    return mask;
}

double ewc_penalty(std::span<const double> theta, std::span<const double> anchor, std::span<const double> fisher,
                   double lambda) {
    check_same(theta, anchor, "ewc_penalty");
    check_same(theta, fisher, "ewc_penalty");
    double sum = 0.0;
    for (std::size_t k = 0; k < theta.size(); ++k) {
        const double d = theta[k] - anchor[k];
        sum += fisher[k] * d * d;
    }
    return 0.5 * lambda * sum;
}

Vector estimate_fisher(const model::ParamSet& params, const mixture::Pool& pool, std::size_t fisher_batches,
                       std::size_t batch_size, Rng& rng) {
    if (pool.empty()) throw std::invalid_argument("cannot estimate Fisher information on an empty pool");
    if (fisher_batches == 0 || batch_size == 0) throw std::invalid_argument("fisher batches and size must be positive");
    Vector fisher(params.size(), 0.0);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::vector<const mixture::Sample*> batch(batch_size);
    model::ParamSet grad;
    for (std::size_t b = 0; b < fisher_batches; ++b) {
        for (auto& s : batch) s = &pool[pick(rng)];
        model::loss_and_grad(params, batch, &grad);
        const Vector g = model::flatten(grad);
        for (std::size_t k = 0; k < g.size(); ++k) fisher[k] += g[k] * g[k];
    }
    for (auto& f : fisher) f /= static_cast<double>(fisher_batches);
    return fisher;
}

void update_fisher(EwcState& state, const Vector& fisher_new, const Vector& anchor) {
    if (state.fisher.empty()) {
        state.fisher = fisher_new;
    } else {
        check_same(state.fisher, fisher_new, "update_fisher");
        for (std::size_t k = 0; k < fisher_new.size(); ++k) state.fisher[k] = 0.5 * (state.fisher[k] + fisher_new[k]);
    }
    state.anchor = anchor;
}

void si_begin_task(SiState& s, std::span<const double> params) {
    s.omega.assign(params.size(), 0.0);
    s.task_start.assign(params.begin(), params.end());
    if (s.importance.empty()) s.importance.assign(params.size(), 0.0);
}

void si_accumulate(SiState& s, std::span<const double> grads, std::span<const double> param_delta) {
    check_same(grads, param_delta, "si_accumulate");
    check_same(grads, s.omega, "si_accumulate");
    for (std::size_t k = 0; k < grads.size(); ++k) s.omega[k] -= grads[k] * param_delta[k];
}

void si_end_task(SiState& s, std::span<const double> params, double zeta) {
    check_same(params, s.task_start, "si_end_task");
    for (std::size_t k = 0; k < params.size(); ++k) {
        const double delta = params[k] - s.task_start[k];
        s.importance[k] += s.omega[k] / (delta * delta + zeta);
    }
    s.anchor.assign(params.begin(), params.end());
}

double si_penalty(std::span<const double> theta, const SiState& s, double c) {
    if (!s.has_history()) return 0.0;
    check_same(theta, s.anchor, "si_penalty");
    double sum = 0.0;
    for (std::size_t k = 0; k < theta.size(); ++k) {
        const double d = s.anchor[k] - theta[k];
        sum += s.importance[k] * d * d;
    }
    return c * sum;
}

model::ParamSet merge_end_of_task(MethodKind kind, const model::ParamSet& theta0, const model::ParamSet& prev,
                                  const model::ParamSet& tuned, double w) {
    if (!is_merge(kind)) throw std::logic_error("merge_end_of_task called for a non-merge method");
    if (!(w >= 0.0 && w <= 1.0)) throw std::invalid_argument("merge weight must lie in [0, 1]");
    if (!theta0.same_shape(prev) || !prev.same_shape(tuned)) throw std::invalid_argument("merge: shape mismatch");
    const Vector old_side = model::flatten(kind == MethodKind::merge_ft ? theta0 : prev);
    const Vector new_side = model::flatten(tuned);
    Vector merged(old_side.size());
    for (std::size_t k = 0; k < merged.size(); ++k) merged[k] = w * old_side[k] + (1.0 - w) * new_side[k];
    model::ParamSet out = tuned;
    model::unflatten(merged, out);
    return out;
}

void absorb_adapters(const MethodConfig& cfg, TrainState& s, Rng& rng) {
    if (!is_low_rank(cfg.kind)) throw std::logic_error("absorb_adapters called for a method without adapters");
    s.params.image.weight = effective_weight(cfg.kind, s.params.image.weight, s.adapters.image);
    s.params.text.weight = effective_weight(cfg.kind, s.params.text.weight, s.adapters.text);
    s.adapters = init_adapters(cfg, s.params, rng);
}

Objective compute_objective(const MethodConfig& cfg, const MethodState& ms, const TrainState& s,
                            model::BatchView batch, bool with_grad) {
    Objective obj;
    const model::ParamSet eff = effective_params(cfg.kind, s);
    model::ParamSet g_eff;
    obj.clip = model::loss_and_grad(eff, batch, with_grad ? &g_eff : nullptr);
    obj.contrastive = obj.clip.loss;

    const bool ewc_on = cfg.kind == MethodKind::ewc && ms.ewc.active() && cfg.ewc_lambda != 0.0;
    const bool si_on = cfg.kind == MethodKind::si && ms.si.has_history() && cfg.si_c != 0.0;
    Vector theta;
    if (ewc_on || si_on) theta = model::flatten(s.params);
    if (ewc_on) obj.penalty += ewc_penalty(theta, ms.ewc.anchor, ms.ewc.fisher, cfg.ewc_lambda);
    if (si_on) obj.penalty += si_penalty(theta, ms.si, cfg.si_c);
    obj.total = obj.contrastive + obj.penalty;
    if (!std::isfinite(obj.total)) throw std::runtime_error("non-finite training objective");
    if (!with_grad) return obj;

    Vector flat_params = model::flatten(g_eff);
    if (cfg.kind == MethodKind::si) obj.contrastive_grad = flat_params;
    if (ewc_on)
        for (std::size_t k = 0; k < theta.size(); ++k)
            flat_params[k] += cfg.ewc_lambda * ms.ewc.fisher[k] * (theta[k] - ms.ewc.anchor[k]);
    if (si_on)
        for (std::size_t k = 0; k < theta.size(); ++k)
            flat_params[k] += 2.0 * cfg.si_c * ms.si.importance[k] * (theta[k] - ms.si.anchor[k]);

    obj.grad = std::move(flat_params);
    if (is_low_rank(cfg.kind)) {
        AdapterPair ga{zeros_like(s.adapters.image), zeros_like(s.adapters.text)};
        adapter_backward(cfg.kind, s.params.image.weight, s.adapters.image, g_eff.image.weight, ga.image);
        adapter_backward(cfg.kind, s.params.text.weight, s.adapters.text, g_eff.text.weight, ga.text);
        flatten_adapter(ga.image, obj.grad);
        flatten_adapter(ga.text, obj.grad);
    } else {
        obj.grad.resize(s.size(), 0.0);
    }
    const auto mask = trainable_mask(cfg.kind, s);
    for (std::size_t k = 0; k < obj.grad.size(); ++k)
        if (!mask[k]) obj.grad[k] = 0.0;
    return obj;
}

}  // namespace cpt::methods
