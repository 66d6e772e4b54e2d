// SPDX-License-Identifier: Apache-2.0
#include "cpt/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <nlohmann/json.hpp>

namespace cpt::mixture {

std::string_view to_string(PoolTag tag) {
    switch (tag) {
        case PoolTag::pretrain: return "pretrain";
        case PoolTag::update: return "update";
        case PoolTag::buffer: return "buffer";
    }
    return "unknown";
}

void MixtureRatios::validate() const {
    for (double l : {lambda_p, lambda_d, lambda_b})
        if (!(l >= 0.0 && l <= 1.0)) throw std::invalid_argument("mixing ratios must lie in [0, 1]");
    if (std::abs(lambda_p + lambda_d + lambda_b - 1.0) > 1e-9)
        throw std::invalid_argument("mixing ratios must sum to 1");
}

MixtureRatios preset_ratios(std::string_view name) {
    if (name == "reference") return {0.33, 0.34, 0.33};
    if (name == "no-buffer") return {0.5, 0.5, 0.0};
    if (name == "pretrain-heavy") return {0.8, 0.1, 0.1};
    if (name == "ibrahim") return {0.05, 0.48, 0.47};
    if (name == "iidify") return {0.0, 0.1, 0.9};
    throw std::invalid_argument("unknown mixture preset '" + std::string(name) + "'");
}

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names{"reference", "no-buffer", "pretrain-heavy", "ibrahim", "iidify"};
    return names;
}

void Buffer::add(const Pool& update_pool) {
    samples_.reserve(samples_.size() + update_pool.size());
    for (const auto& s : update_pool) {
        samples_.push_back(s);
        samples_.back().pool_tag = PoolTag::buffer;
    }
}

namespace {
constexpr double kSlack = 1e-9;
}  // namespace

SourceCounts target_counts(const MixtureRatios& ratios, std::size_t batch_size) {
    ratios.validate();
    if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
    const std::array<double, 3> lambdas{ratios.lambda_p, ratios.lambda_d, ratios.lambda_b};
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> remainder{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double exact = lambdas[i] * static_cast<double>(batch_size);
        // The slack absorbs representation error such as 0.3 * 10 = 2.9999999999999996.
        counts[i] = static_cast<std::size_t>(std::floor(exact + kSlack));
        remainder[i] = std::max(0.0, exact - static_cast<double>(counts[i]));
        assigned += counts[i];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return remainder[a] > remainder[b] + kSlack; });
    for (std::size_t k = 0; assigned < batch_size; k = (k + 1) % 3) {
        ++counts[order[k]];
        ++assigned;
    }
    return {counts[0], counts[1], counts[2]};
}

SourceCounts allocate(const MixtureRatios& ratios, std::size_t batch_size, std::size_t buffer_size) {
    SourceCounts c = target_counts(ratios, batch_size);
    if (buffer_size < c.buffer) {
        c.update += c.buffer - buffer_size;
        c.buffer = buffer_size;
    }
    return c;
}

Batch sample_batch(const Pool& pretrain, const Pool& update, const Buffer& buffer, const MixtureRatios& ratios,
                   std::size_t batch_size, Rng& rng) {
    if (update.empty()) throw std::invalid_argument("update pool is empty");
    Batch batch;
    batch.counts = allocate(ratios, batch_size, buffer.size());
    if (batch.counts.pretrain > 0 && pretrain.empty())
        throw std::invalid_argument("pretraining pool is empty but lambda_p > 0");
    batch.samples.reserve(batch_size);
    auto draw = [&](const Pool& pool, std::size_t count) {
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (std::size_t i = 0; i < count; ++i) batch.samples.push_back(&pool[pick(rng)]);
    };
    if (batch.counts.pretrain) draw(pretrain, batch.counts.pretrain);
    draw(update, batch.counts.update);
    if (batch.counts.buffer) draw(buffer.samples(), batch.counts.buffer);
    return batch;
}

std::string pool_snapshot(const Pool& pretrain, const Pool& update, const Buffer& buffer) {
    auto describe = [](const Pool& pool) {
        std::map<std::string, std::size_t> hist;
        for (const auto& s : pool) ++hist[s.concept_id];
        nlohmann::json j;
        j["size"] = pool.size();
        j["concepts"] = hist;
        return j;
    };
    nlohmann::json j;
    j["pretrain"] = describe(pretrain);
    j["update"] = describe(update);
    j["buffer"] = describe(buffer.samples());
    return j.dump(2) + "\n";
}

}  // namespace cpt::mixture
