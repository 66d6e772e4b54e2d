// SPDX-License-Identifier: Apache-2.0
#include "cpt/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace cpt::model {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

Tower make_tower(std::size_t d_in, std::size_t d_emb, double fill) {
    return Tower{Matrix(d_emb, d_in), Vector(d_emb, 0.0), Vector(d_emb, fill), Vector(d_emb, 0.0)};
}

Tower zeros_like(const Tower& t) { return make_tower(t.d_in(), t.d_emb(), 0.0); }

bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Forward pass of one tower over a batch, keeping what the backward pass needs.
struct TowerForward {
    Matrix inputs;     // B x d_in
    Matrix hidden;     // W x + b
    Matrix shifted;    // scale * hidden + shift
    Vector norms;      // ||shifted||
    Matrix embedding;  // shifted / (||shifted|| + eps)
};

TowerForward forward(const Tower& t, BatchView batch, TowerId id) {
    const std::size_t n = batch.size();
    TowerForward f{Matrix(n, t.d_in()), Matrix(n, t.d_emb()), Matrix(n, t.d_emb()), Vector(n),
                   Matrix(n, t.d_emb())};
    for (std::size_t i = 0; i < n; ++i) {
        const Vector& x = id == TowerId::image ? batch[i]->image_features : batch[i]->text_features;
        if (x.size() != t.d_in()) throw std::invalid_argument("sample feature dimension does not match the model");
        std::copy(x.begin(), x.end(), f.inputs.row(i).begin());
        auto h = f.hidden.row(i);
        matvec(t.weight, x, h);
        auto z = f.shifted.row(i);
        for (std::size_t k = 0; k < h.size(); ++k) {
            h[k] += t.bias[k];
            z[k] = t.scale[k] * h[k] + t.shift[k];
        }
        f.norms[i] = std::sqrt(squared_norm(z));
        const double denom = f.norms[i] + kNormEpsilon;
        auto e = f.embedding.row(i);
        for (std::size_t k = 0; k < z.size(); ++k) e[k] = z[k] / denom;
    }
    return f;
}

void backward(const Tower& t, const TowerForward& f, const Matrix& d_embedding, Tower& g) {
    const std::size_t d = t.d_emb();
    Vector g_z(d), g_h(d);
    for (std::size_t i = 0; i < f.inputs.rows; ++i) {
        const auto z = f.shifted.row(i);
        const auto ge = d_embedding.row(i);
        const double norm = f.norms[i];
        const double denom = norm + kNormEpsilon;
        const double zg = dot(z, ge);
        const double radial = norm > 0.0 ? zg / (denom * denom * norm) : 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            g_z[k] = ge[k] / denom - z[k] * radial;
            g.scale[k] += g_z[k] * f.hidden(i, k);
            g.shift[k] += g_z[k];
            g_h[k] = g_z[k] * t.scale[k];
            g.bias[k] += g_h[k];
        }
        const auto x = f.inputs.row(i);
        for (std::size_t k = 0; k < d; ++k) {
            if (g_h[k] == 0.0) continue;
            auto wrow = g.weight.row(k);
            for (std::size_t j = 0; j < x.size(); ++j) wrow[j] += g_h[k] * x[j];
        }
    }
}

template <class T>
void write_raw(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("truncated checkpoint");
    return v;
}

constexpr char kMagic[8] = {'C', 'P', 'T', 'C', 'K', 'P', 'T', '1'};

}  // namespace

ParamSet ParamSet::zeros(std::size_t d_in, std::size_t d_emb) {
    return ParamSet{make_tower(d_in, d_emb, 1.0), make_tower(d_in, d_emb, 1.0), 0.0};
}

ParamSet ParamSet::zeros_like(const ParamSet& p) {
    return ParamSet{model::zeros_like(p.image), model::zeros_like(p.text), 0.0};
}

double ParamSet::temperature() const { return std::exp(log_temperature); }

std::size_t ParamSet::size() const {
    auto tower_size = [](const Tower& t) { return t.weight.data.size() + 3 * t.d_emb(); };
    return tower_size(image) + tower_size(text) + 1;
}

bool ParamSet::same_shape(const ParamSet& o) const {
    return image.weight.same_shape(o.image.weight) && text.weight.same_shape(o.text.weight) &&
           image.bias.size() == o.image.bias.size() && text.bias.size() == o.text.bias.size();
}

std::vector<std::string> parameter_names() {
    return {"image.weight", "image.bias", "image.scale", "image.shift", "text.weight",
            "text.bias",    "text.scale", "text.shift",  "log_temperature"};
}

std::vector<TensorSlot> layout(const ParamSet& p) {
    std::vector<TensorSlot> slots;
    std::size_t offset = 0;
    auto add = [&](std::string name, std::vector<std::size_t> shape) {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        slots.push_back({std::move(name), std::move(shape), offset, n});
        offset += n;
    };
    for (const auto* t : {&p.image, &p.text}) {
        const std::string prefix = t == &p.image ? "image." : "text.";
        add(prefix + "weight", {t->d_emb(), t->d_in()});
        add(prefix + "bias", {t->d_emb()});
        add(prefix + "scale", {t->d_emb()});
        add(prefix + "shift", {t->d_emb()});
    }
    add("log_temperature", {});
    return slots;
}

Vector flatten(const ParamSet& p) {
    Vector flat;
    flat.reserve(p.size());
    for (const auto* t : {&p.image, &p.text}) {
        flat.insert(flat.end(), t->weight.data.begin(), t->weight.data.end());
        flat.insert(flat.end(), t->bias.begin(), t->bias.end());
        flat.insert(flat.end(), t->scale.begin(), t->scale.end());
        flat.insert(flat.end(), t->shift.begin(), t->shift.end());
    }
    flat.push_back(p.log_temperature);
    return flat;
}

void unflatten(std::span<const double> flat, ParamSet& p) {
    if (flat.size() != p.size()) throw std::invalid_argument("flat parameter vector has the wrong size");
    auto it = flat.begin();
    auto take = [&](std::span<double> dst) {
        std::copy(it, it + static_cast<std::ptrdiff_t>(dst.size()), dst.begin());
        it += static_cast<std::ptrdiff_t>(dst.size());
    };
    for (auto* t : {&p.image, &p.text}) {
        take(t->weight.data);
        take(t->bias);
        take(t->scale);
        take(t->shift);
    }
    p.log_temperature = *it;
}

Vector encode(const ParamSet& p, TowerId tower, std::span<const double> x) {
    const Tower& t = p.tower(tower);
    if (x.size() != t.d_in()) throw std::invalid_argument("input dimension does not match the model");
    Vector z(t.d_emb());
    matvec(t.weight, x, z);
    for (std::size_t k = 0; k < z.size(); ++k) z[k] = t.scale[k] * (z[k] + t.bias[k]) + t.shift[k];
    const double denom = std::sqrt(squared_norm(z)) + kNormEpsilon;
    for (auto& v : z) v /= denom;
    return z;
}

ClipLoss clip_loss(const Matrix& img, const Matrix& txt, double tau, Matrix* d_img, Matrix* d_txt,
                   double* d_log_tau) {
    if (!img.same_shape(txt)) throw std::invalid_argument("image and text batches differ in size");
    if (img.rows == 0) throw std::invalid_argument("empty batch");
    if (!(tau > 0.0)) throw std::domain_error("temperature must be positive");
    const std::size_t n = img.rows;
    const double inv_tau = 1.0 / tau;

    Matrix logits(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) logits(i, j) = dot(img.row(i), txt.row(j)) * inv_tau;

    // Row softmax (image -> text) and column softmax (text -> image).
    Matrix p_row(n, n), p_col(n, n);
    ClipLoss out;
    out.per_sample.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, logits(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += (p_row(i, j) = std::exp(logits(i, j) - mx));
        for (std::size_t j = 0; j < n; ++j) p_row(i, j) /= sum;
        out.per_sample[i] += 0.5 * (mx + std::log(sum) - logits(i, i));
    }
    for (std::size_t j = 0; j < n; ++j) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, logits(i, j));
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += (p_col(i, j) = std::exp(logits(i, j) - mx));
        for (std::size_t i = 0; i < n; ++i) p_col(i, j) /= sum;
        out.per_sample[j] += 0.5 * (mx + std::log(sum) - logits(j, j));
    }
    for (double l : out.per_sample) out.loss += l;
    out.loss /= static_cast<double>(n);

    if (d_img || d_txt || d_log_tau) {
        // dL/dlogits = ((P_row - I) + (P_col - I)) / (2n)
        Matrix g(n, n);
        const double scale = 0.5 / static_cast<double>(n);
        double g_log_tau = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                g(i, j) = scale * (p_row(i, j) + p_col(i, j) - (i == j ? 2.0 : 0.0));
                g_log_tau -= g(i, j) * logits(i, j);
            }
        if (d_img) {
            *d_img = Matrix(n, img.cols);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double w = g(i, j) * inv_tau;
                    auto dst = d_img->row(i);
                    const auto src = txt.row(j);
                    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += w * src[k];
                }
        }
        if (d_txt) {
            *d_txt = Matrix(n, txt.cols);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double w = g(i, j) * inv_tau;
                    auto dst = d_txt->row(j);
                    const auto src = img.row(i);
                    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += w * src[k];
                }
        }
        if (d_log_tau) *d_log_tau = g_log_tau;
    }
    return out;
}

ClipLoss loss_and_grad(const ParamSet& p, BatchView batch, ParamSet* grad) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    const TowerForward fi = forward(p.image, batch, TowerId::image);
    const TowerForward ft = forward(p.text, batch, TowerId::text);
    Matrix d_img, d_txt;
    double d_log_tau = 0.0;
    ClipLoss loss = grad ? clip_loss(fi.embedding, ft.embedding, p.temperature(), &d_img, &d_txt, &d_log_tau)
                         : clip_loss(fi.embedding, ft.embedding, p.temperature());
    if (!std::isfinite(loss.loss))
        throw std::runtime_error("non-finite contrastive loss (temperature " + std::to_string(p.temperature()) + ")");
    if (grad) {
        *grad = ParamSet::zeros_like(p);
        backward(p.image, fi, d_img, grad->image);
        backward(p.text, ft, d_txt, grad->text);
        grad->log_temperature = d_log_tau;
    }
    return loss;
}

void OptimizerState::reset(std::size_t n) {
    first_moment.assign(n, 0.0);
    second_moment.assign(n, 0.0);
    step = 0;
}

double clip_global_norm(std::span<double> grads, double clip_norm) {
    const double norm = std::sqrt(squared_norm(grads));
    if (clip_norm > 0.0 && norm > clip_norm) {
        const double s = clip_norm / norm;
        for (auto& g : grads) g *= s;
    }
    return norm;
}

double optimizer_step(std::span<double> params, std::span<double> grads, OptimizerState& state, double lr,
                      double clip_norm, std::span<const char> decay_mask) {
    if (params.size() != grads.size()) throw std::invalid_argument("parameter and gradient sizes differ");
    if (!decay_mask.empty() && decay_mask.size() != params.size())
        throw std::invalid_argument("decay mask size differs from parameters");
    if (!all_finite(grads)) throw std::runtime_error("non-finite gradient");
    if (state.first_moment.size() != params.size()) state.reset(params.size());

    const double norm = clip_global_norm(grads, clip_norm);
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g * g;
        if (decay_mask.empty() || decay_mask[i]) params[i] -= lr * state.weight_decay * params[i];
        params[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + state.epsilon);
    }
    return norm;
}

std::map<streams::ConceptId, std::pair<std::size_t, std::size_t>> zero_shot_counts(
    const ParamSet& p, const std::map<streams::ConceptId, Vector>& prototypes,
    std::span<const mixture::Sample> samples) {
    if (prototypes.empty()) throw std::invalid_argument("no class prototypes");
    std::vector<const streams::ConceptId*> ids;
    std::vector<Vector> text_emb;
    for (const auto& [id, features] : prototypes) {
        ids.push_back(&id);
        text_emb.push_back(encode(p, TowerId::text, features));
    }
    std::map<streams::ConceptId, std::pair<std::size_t, std::size_t>> counts;
    for (const auto& s : samples) {
        if (!prototypes.contains(s.concept_id))
            throw std::invalid_argument("no prototype for concept '" + s.concept_id + "'");
        const Vector e = encode(p, TowerId::image, s.image_features);
        std::size_t best = 0;
        double best_sim = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < text_emb.size(); ++c) {
            const double sim = dot(e, text_emb[c]);
            if (sim > best_sim) {
                best_sim = sim;
                best = c;
            }
        }
        auto& [correct, total] = counts[s.concept_id];
        ++total;
        if (*ids[best] == s.concept_id) ++correct;
    }
    return counts;
}

double zero_shot_eval(const ParamSet& p, const std::map<streams::ConceptId, Vector>& prototypes,
                      std::span<const mixture::Sample> samples) {
    if (samples.empty()) throw std::invalid_argument("empty evaluation set");
    std::size_t correct = 0;
    for (const auto& [id, c] : zero_shot_counts(p, prototypes, samples)) correct += c.first;
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

void clamp_temperature(ParamSet& p, double min_tau, bool enabled) {
    if (enabled && p.log_temperature < std::log(min_tau)) p.log_temperature = std::log(min_tau);
}

std::vector<TensorRecord> to_records(const ParamSet& p) {
    const Vector flat = flatten(p);
    std::vector<TensorRecord> out;
    for (const auto& slot : layout(p)) {
        TensorRecord r;
        r.name = slot.name;
        r.shape.assign(slot.shape.begin(), slot.shape.end());
        r.values.assign(flat.begin() + static_cast<std::ptrdiff_t>(slot.offset),
                        flat.begin() + static_cast<std::ptrdiff_t>(slot.offset + slot.size));
        out.push_back(std::move(r));
    }
    return out;
}

ParamSet from_records(const std::vector<TensorRecord>& records) {
    auto find = [&](const std::string& name) -> const TensorRecord& {
        for (const auto& r : records)
            if (r.name == name) return r;
        throw std::invalid_argument("checkpoint lacks tensor '" + name + "'");
    };
    const auto& w = find("image.weight");
    if (w.shape.size() != 2) throw std::invalid_argument("image.weight must be a matrix");
    ParamSet p = ParamSet::zeros(w.shape[1], w.shape[0]);
    Vector flat;
    for (const auto& slot : layout(p)) {
        const auto& r = find(slot.name);
        if (r.values.size() != slot.size) throw std::invalid_argument("tensor '" + slot.name + "' has the wrong size");
        flat.insert(flat.end(), r.values.begin(), r.values.end());
    }
    unflatten(flat, p);
    return p;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<TensorRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_raw<std::uint64_t>(out, records.size());
    for (const auto& r : records) {
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
        out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
        for (auto d : r.shape) write_raw<std::uint64_t>(out, d);
        out.write(reinterpret_cast<const char*>(r.values.data()),
                  static_cast<std::streamsize>(r.values.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

std::vector<TensorRecord> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error("not a checkpoint file");
    const auto count = read_raw<std::uint64_t>(in);
    std::vector<TensorRecord> records(count);
    for (auto& r : records) {
        r.name.resize(read_raw<std::uint32_t>(in));
        in.read(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        r.shape.resize(read_raw<std::uint32_t>(in));
        std::uint64_t n = 1;
        for (auto& d : r.shape) n *= (d = read_raw<std::uint64_t>(in));
        r.values.resize(n);
        in.read(reinterpret_cast<char*>(r.values.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw std::runtime_error("truncated checkpoint");
    }
    return records;
}

}  // namespace cpt::model
