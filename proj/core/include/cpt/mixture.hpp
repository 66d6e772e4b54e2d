// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "cpt/rng.hpp"
#include "cpt/streams.hpp"
#include "cpt/tensor.hpp"

namespace cpt::mixture {

enum class PoolTag { pretrain, update, buffer };
std::string_view to_string(PoolTag tag);

/// One image-text pair in raw feature space.
struct Sample {
    Vector image_features;
    Vector text_features;
    streams::ConceptId concept_id;
    PoolTag pool_tag = PoolTag::update;
};

using Pool = std::vector<Sample>;

/// Fractions of each batch drawn from the pretraining pool, the current update pool and the buffer.
struct MixtureRatios {
    double lambda_p = 0.33;
    double lambda_d = 0.34;
    double lambda_b = 0.33;

    /// Throws std::invalid_argument unless each ratio lies in [0, 1] and they sum to 1 (1e-9).
    void validate() const;
    bool operator==(const MixtureRatios&) const = default;
};

/// Named presets: reference, no-buffer, pretrain-heavy, ibrahim, iidify.
MixtureRatios preset_ratios(std::string_view name);
const std::vector<std::string>& preset_names();

/// Unbounded replay buffer holding every update sample streamed so far.
class Buffer {
public:
    void add(const Pool& update_pool);
    std::size_t size() const { return samples_.size(); }
    bool empty() const { return samples_.empty(); }
    const Pool& samples() const { return samples_; }

private:
    Pool samples_;
};

/// Per-source sample counts in the order (pretrain, update, buffer).
struct SourceCounts {
    std::size_t pretrain = 0;
    std::size_t update = 0;
    std::size_t buffer = 0;

    std::size_t total() const { return pretrain + update + buffer; }
    bool operator==(const SourceCounts&) const = default;
};

/// Largest-remainder apportionment of lambda * batch_size; ties go to the earlier source.
SourceCounts target_counts(const MixtureRatios& ratios, std::size_t batch_size);

/// Target counts after moving any buffer shortfall (buffer smaller than its quota) to the update pool.
SourceCounts allocate(const MixtureRatios& ratios, std::size_t batch_size, std::size_t buffer_size);

struct Batch {
    std::vector<const Sample*> samples;
    SourceCounts counts;
};

/// Draws a batch: counts from allocate(), then uniform draws with replacement inside each pool.
Batch sample_batch(const Pool& pretrain, const Pool& update, const Buffer& buffer, const MixtureRatios& ratios,
                   std::size_t batch_size, Rng& rng);

/// JSON snapshot of pool sizes and per-concept histograms.
std::string pool_snapshot(const Pool& pretrain, const Pool& update, const Buffer& buffer);

}  // namespace cpt::mixture
