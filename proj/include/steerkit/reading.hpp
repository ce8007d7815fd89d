#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "steerkit/engine.hpp"

namespace steerkit {

// ---------------------------------------------------------------------------
// Stimulus construction
// ---------------------------------------------------------------------------

// A prompt paired with a truncated fast thought (positive side) and a slow
// thought truncated to the step boundary nearest in token length.
struct StimulusPair {
    std::string id;
    std::string prompt;
    std::string positive_text; // prompt + truncated fast thought
    std::string negative_text; // prompt + truncated slow thought
};

// Counts tokens of a text under whatever tokenizer the harness uses.
using TokenCounter = std::function<std::size_t(const std::string &)>;

// Steps are delimited by blank lines; a response with no delimiter is one step.
std::vector<std::string> split_steps(std::string_view text);

// Keeps the fast response's first 2 steps; truncates the slow response at the
// step boundary whose cumulative token length is nearest to the positive
// side's (ties to the shorter truncation). Trailing delimiters are dropped.
StimulusPair build_stimulus_pair(std::string_view prompt, std::string_view fast_response,
                                 std::string_view slow_response, const TokenCounter &count_tokens);

// Raw corpus record as stored on disk (untruncated responses).
struct StimulusRecord {
    std::string id;
    std::string prompt;
    std::string fast;
    std::string slow;
};

std::vector<StimulusRecord> load_stimulus_jsonl(const std::string &path);
void save_stimulus_jsonl(const std::string &path, const std::vector<StimulusRecord> &records);
std::vector<StimulusPair> build_stimulus_pairs(const std::vector<StimulusRecord> &records,
                                               const TokenCounter &count_tokens);

// ---------------------------------------------------------------------------
// Hidden-state collection
// ---------------------------------------------------------------------------

struct RepresentationPair {
    int layer = 0;
    std::vector<float> h_pos; // hidden at last token of the positive stimulus
    std::vector<float> h_neg;
};

struct HiddenPairs {
    std::map<int, std::vector<RepresentationPair>> by_layer;
    std::vector<std::string> skipped_ids; // stimuli exceeding max_seq_len
};

HiddenPairs collect_hidden_pairs(const Model &model, const Vocabulary &vocab,
                                 const std::vector<StimulusPair> &pairs,
                                 const std::set<int> &layers);

// ---------------------------------------------------------------------------
// Difference vectors and PCA
// ---------------------------------------------------------------------------

struct SignedDiff {
    std::vector<float> values;
    bool forward = true; // true: h_pos - h_neg
};

// A seeded uniformly-random half of the pairs (ceil on odd counts) keeps the
// forward orientation; the remainder is reversed. Output order matches input.
std::vector<SignedDiff> compute_difference_set(const std::vector<RepresentationPair> &reps,
                                               std::uint64_t split_seed);

// First principal component of the mean-centered difference set, computed by
// power iteration on the covariance (residual tolerance 1e-10). Throws
// DegenerateInputError when all vectors are identical.
std::vector<float> pca_first_component(const std::vector<std::vector<float>> &diffs);

// Flips the component so its mean score over the forward differences is
// nonnegative; a zero mean resolves to the unflipped component.
std::vector<float> calibrate_direction(const std::vector<float> &component,
                                       const std::vector<std::vector<float>> &forward_diffs);

// Fraction of held-out differences whose projection sign matches their label
// (predicted forward iff v . d > 0; zero projections predict reversed).
double validate_separation(const std::vector<float> &vector, const std::vector<SignedDiff> &heldout);

// ---------------------------------------------------------------------------
// Full extraction pipeline
// ---------------------------------------------------------------------------

struct SteeringVectorSet {
    struct Meta {
        std::string model_name;
        int model_layers = 0;
        int d_model = 0;
        std::size_t fit_pairs = 0;
        std::size_t val_pairs = 0;
        std::uint64_t split_seed = 0;
        std::map<int, double> val_accuracy;
    };

    std::map<int, std::vector<float>> per_layer; // layer -> unit direction
    Meta meta;

    void save(const std::string &path) const;
    static SteeringVectorSet load(const std::string &path);
};

struct FitSplit {
    std::size_t fit_count = 0;
    std::uint64_t seed = 0;
};

// Collects hidden pairs, fits a calibrated unit direction per layer on a
// seeded random fit subset, and scores sign separation on the held-out
// remainder (each held-out pair contributes one forward and one reversed
// difference).
SteeringVectorSet extract_steering_vectors(const Model &model, const Vocabulary &vocab,
                                           const std::vector<StimulusPair> &pairs,
                                           const std::set<int> &layers, const FitSplit &split);

// Deterministic in-place Fisher-Yates shuffle shared by the seeded splits.
void seeded_shuffle(std::vector<std::size_t> &indices, std::uint64_t seed);

} // namespace steerkit
