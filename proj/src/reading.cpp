#include "steerkit/reading.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include <json.hpp>

#include "steerkit/tensorio.hpp"

namespace steerkit {

// ---------------------------------------------------------------------------
// Stimulus construction
// ---------------------------------------------------------------------------

static constexpr std::string_view kStepDelimiter = "\n\n";
static constexpr std::size_t kFastStepsKept = 2;

std::vector<std::string> split_steps(std::string_view text) {
    std::vector<std::string> steps;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t hit = text.find(kStepDelimiter, start);
        if (hit == std::string_view::npos) {
            steps.emplace_back(text.substr(start));
            break;
        }
        steps.emplace_back(text.substr(start, hit - start));
        start = hit + kStepDelimiter.size();
    }
    // A trailing delimiter yields an empty final segment, not an extra step.
    if (steps.size() > 1 && steps.back().empty()) {
        steps.pop_back();
    }
    return steps;
}

namespace {

std::string join_steps(const std::vector<std::string> &steps, std::size_t count) {
    std::string out;
    for (std::size_t i = 0; i < count && i < steps.size(); ++i) {
        if (i > 0) {
            out += kStepDelimiter;
        }
        out += steps[i];
    }
    return out;
}

} // namespace

StimulusPair build_stimulus_pair(std::string_view prompt, std::string_view fast_response,
                                 std::string_view slow_response, const TokenCounter &count_tokens) {
    if (fast_response.empty() || slow_response.empty()) {
        throw InvalidArgumentError("stimulus responses must be nonempty");
    }
    if (!count_tokens) {
        throw InvalidArgumentError("a token counter is required");
    }

    const std::vector<std::string> fast_steps = split_steps(fast_response);
    const std::string positive_thought = join_steps(fast_steps, kFastStepsKept);
    const std::size_t target_len = count_tokens(positive_thought);

    const std::vector<std::string> slow_steps = split_steps(slow_response);
    std::size_t best_count = 1;
    std::size_t best_dist = std::numeric_limits<std::size_t>::max();
    for (std::size_t j = 1; j <= slow_steps.size(); ++j) {
        const std::size_t len = count_tokens(join_steps(slow_steps, j));
        const std::size_t dist = len > target_len ? len - target_len : target_len - len;
        if (dist < best_dist) { // ties keep the shorter truncation
            best_dist = dist;
            best_count = j;
        }
    }
    const std::string negative_thought = join_steps(slow_steps, best_count);

    StimulusPair pair;
    pair.prompt = std::string(prompt);
    pair.positive_text = pair.prompt + positive_thought;
    pair.negative_text = pair.prompt + negative_thought;
    return pair;
}

std::vector<StimulusRecord> load_stimulus_jsonl(const std::string &path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open stimulus file: " + path);
    }
    std::vector<StimulusRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception &e) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        StimulusRecord r;
        r.id = j.value("id", std::to_string(lineno));
        r.prompt = j.at("prompt").get<std::string>();
        r.fast = j.at("fast").get<std::string>();
        r.slow = j.at("slow").get<std::string>();
        records.push_back(std::move(r));
    }
    return records;
}

void save_stimulus_jsonl(const std::string &path, const std::vector<StimulusRecord> &records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open for writing: " + path);
    }
    for (const auto &r : records) {
        nlohmann::json j{{"id", r.id}, {"prompt", r.prompt}, {"fast", r.fast}, {"slow", r.slow}};
        out << j.dump() << "\n";
    }
}

std::vector<StimulusPair> build_stimulus_pairs(const std::vector<StimulusRecord> &records,
                                               const TokenCounter &count_tokens) {
    std::vector<StimulusPair> pairs;
    pairs.reserve(records.size());
    for (const auto &r : records) {
        StimulusPair p = build_stimulus_pair(r.prompt, r.fast, r.slow, count_tokens);
        p.id = r.id;
        pairs.push_back(std::move(p));
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Hidden-state collection
// ---------------------------------------------------------------------------

HiddenPairs collect_hidden_pairs(const Model &model, const Vocabulary &vocab,
                                 const std::vector<StimulusPair> &pairs,
                                 const std::set<int> &layers) {
    if (pairs.empty()) {
        throw InvalidArgumentError("no stimulus pairs given");
    }
    ProbeSpec probe;
    probe.hidden_layers = layers;
    probe.validate(model.config().n_layers);

    HiddenPairs out;
    for (int l : layers) {
        out.by_layer[l] = {};
    }
    const int max_seq = model.config().max_seq_len;
    for (const auto &pair : pairs) {
        const TokenSequence pos_tokens = vocab.encode(pair.positive_text);
        const TokenSequence neg_tokens = vocab.encode(pair.negative_text);
        if (static_cast<int>(pos_tokens.size()) > max_seq ||
            static_cast<int>(neg_tokens.size()) > max_seq ||
            pos_tokens.empty() || neg_tokens.empty()) {
            out.skipped_ids.push_back(pair.id);
            continue;
        }
        const StepOutput pos_out = forward_step(model, pos_tokens, nullptr, probe);
        const StepOutput neg_out = forward_step(model, neg_tokens, nullptr, probe);
        for (int l : layers) {
            RepresentationPair rep;
            rep.layer = l;
            rep.h_pos = pos_out.probed_hidden.at(l);
            rep.h_neg = neg_out.probed_hidden.at(l);
            out.by_layer[l].push_back(std::move(rep));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Difference vectors and PCA
// ---------------------------------------------------------------------------

void seeded_shuffle(std::vector<std::size_t> &indices, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    for (std::size_t i = indices.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(gen() % i);
        std::swap(indices[i - 1], indices[j]);
    }
}

std::vector<SignedDiff> compute_difference_set(const std::vector<RepresentationPair> &reps,
                                               std::uint64_t split_seed) {
    if (reps.empty()) {
        throw InvalidArgumentError("empty representation list");
    }
    const std::size_t n = reps.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    seeded_shuffle(order, split_seed);

    const std::size_t forward_count = (n + 1) / 2; // odd counts favor forward
    std::vector<bool> is_forward(n, false);
    for (std::size_t i = 0; i < forward_count; ++i) {
        is_forward[order[i]] = true;
    }

    std::vector<SignedDiff> diffs(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto &rep = reps[i];
        if (rep.h_pos.size() != rep.h_neg.size()) {
            throw InvalidArgumentError("representation pair dimension mismatch");
        }
        SignedDiff &d = diffs[i];
        d.forward = is_forward[i];
        d.values.resize(rep.h_pos.size());
        for (std::size_t k = 0; k < rep.h_pos.size(); ++k) {
            d.values[k] = d.forward ? rep.h_pos[k] - rep.h_neg[k] : rep.h_neg[k] - rep.h_pos[k];
        }
    }
    return diffs;
}

namespace {

constexpr double kPcaResidualTol = 1e-10;
constexpr int kPcaMaxIters = 200000;

} // namespace

std::vector<float> pca_first_component(const std::vector<std::vector<float>> &diffs) {
    if (diffs.size() < 2) {
        throw InvalidArgumentError("PCA needs at least 2 vectors");
    }
    const std::size_t n = diffs.size();
    const std::size_t d = diffs[0].size();
    for (const auto &v : diffs) {
        if (v.size() != d) {
            throw InvalidArgumentError("difference vectors have mixed dimensions");
        }
    }

    std::vector<double> mean(d, 0.0);
    for (const auto &v : diffs) {
        for (std::size_t i = 0; i < d; ++i) {
            mean[i] += v[i];
        }
    }
    for (double &m : mean) {
        m /= static_cast<double>(n);
    }

    // covariance of the centered set
    std::vector<double> cov(d * d, 0.0);
    for (const auto &v : diffs) {
        for (std::size_t i = 0; i < d; ++i) {
            const double ci = v[i] - mean[i];
            for (std::size_t j = i; j < d; ++j) {
                cov[i * d + j] += ci * (v[j] - mean[j]);
            }
        }
    }
    const double denom = static_cast<double>(n - 1);
    double max_abs = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i; j < d; ++j) {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
            max_abs = std::max(max_abs, std::abs(cov[i * d + j]));
        }
    }
    if (max_abs < 1e-30) {
        throw DegenerateInputError("all difference vectors are identical");
    }

    // power iteration, deterministic start at the largest-variance axis
    std::size_t start_axis = 0;
    for (std::size_t i = 1; i < d; ++i) {
        if (cov[i * d + i] > cov[start_axis * d + start_axis]) {
            start_axis = i;
        }
    }
    std::vector<double> v(d, 0.0), cv(d, 0.0);
    v[start_axis] = 1.0;

    for (int iter = 0; iter < kPcaMaxIters; ++iter) {
        for (std::size_t i = 0; i < d; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                acc += cov[i * d + j] * v[j];
            }
            cv[i] = acc;
        }
        double lambda = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            lambda += v[i] * cv[i];
        }
        double resid = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double r = cv[i] - lambda * v[i];
            resid += r * r;
        }
        resid = std::sqrt(resid);

        double norm = 0.0;
        for (double x : cv) {
            norm += x * x;
        }
        norm = std::sqrt(norm);
        if (norm < 1e-300) {
            // start vector fell in the null space; nudge to another axis
            std::fill(v.begin(), v.end(), 0.0);
            v[(start_axis + static_cast<std::size_t>(iter) + 1) % d] = 1.0;
            continue;
        }
        for (std::size_t i = 0; i < d; ++i) {
            v[i] = cv[i] / norm;
        }
        if (resid <= kPcaResidualTol * std::max(1.0, std::abs(lambda))) {
            break;
        }
    }

    // canonical sign: largest-magnitude coordinate positive
    std::size_t pivot = 0;
    for (std::size_t i = 1; i < d; ++i) {
        if (std::abs(v[i]) > std::abs(v[pivot])) {
            pivot = i;
        }
    }
    if (v[pivot] < 0.0) {
        for (double &x : v) {
            x = -x;
        }
    }

    std::vector<float> out(d);
    for (std::size_t i = 0; i < d; ++i) {
        out[i] = static_cast<float>(v[i]);
    }
    return out;
}

namespace {

double mean_score(const std::vector<float> &v, const std::vector<std::vector<float>> &diffs) {
    double total = 0.0;
    for (const auto &dvec : diffs) {
        if (dvec.size() != v.size()) {
            throw InvalidArgumentError("difference dimension mismatch during calibration");
        }
        double dot = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            dot += static_cast<double>(v[i]) * static_cast<double>(dvec[i]);
        }
        total += dot;
    }
    return total / static_cast<double>(diffs.size());
}

} // namespace

std::vector<float> calibrate_direction(const std::vector<float> &component,
                                       const std::vector<std::vector<float>> &forward_diffs) {
    if (forward_diffs.empty()) {
        throw InvalidArgumentError("calibration needs at least one forward difference");
    }
    if (mean_score(component, forward_diffs) >= 0.0) {
        return component;
    }
    std::vector<float> flipped(component.size());
    for (std::size_t i = 0; i < component.size(); ++i) {
        flipped[i] = -component[i];
    }
    return flipped;
}

double validate_separation(const std::vector<float> &vector, const std::vector<SignedDiff> &heldout) {
    if (heldout.empty()) {
        throw InvalidArgumentError("empty held-out set");
    }
    std::size_t correct = 0;
    for (const auto &diff : heldout) {
        if (diff.values.size() != vector.size()) {
            throw InvalidArgumentError("held-out difference dimension mismatch");
        }
        double dot = 0.0;
        for (std::size_t i = 0; i < vector.size(); ++i) {
            dot += static_cast<double>(vector[i]) * static_cast<double>(diff.values[i]);
        }
        const bool predicted_forward = dot > 0.0;
        if (predicted_forward == diff.forward) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(heldout.size());
}

// ---------------------------------------------------------------------------
// Full extraction pipeline
// ---------------------------------------------------------------------------

SteeringVectorSet extract_steering_vectors(const Model &model, const Vocabulary &vocab,
                                           const std::vector<StimulusPair> &pairs,
                                           const std::set<int> &layers, const FitSplit &split) {
    if (layers.empty()) {
        throw InvalidArgumentError("no layers requested");
    }
    HiddenPairs collected = collect_hidden_pairs(model, vocab, pairs, layers);
    const std::size_t usable = collected.by_layer.begin()->second.size();
    if (split.fit_count < 2 || split.fit_count >= usable) {
        throw InvalidArgumentError("fit_count must be in [2, usable pairs); have " +
                                   std::to_string(usable) + " usable pairs");
    }

    std::vector<std::size_t> order(usable);
    std::iota(order.begin(), order.end(), 0);
    seeded_shuffle(order, split.seed);

    SteeringVectorSet set;
    set.meta.model_name = model.name();
    set.meta.model_layers = model.config().n_layers;
    set.meta.d_model = model.config().d_model;
    set.meta.fit_pairs = split.fit_count;
    set.meta.val_pairs = usable - split.fit_count;
    set.meta.split_seed = split.seed;

    for (int l : layers) {
        const auto &reps = collected.by_layer.at(l);

        std::vector<RepresentationPair> fit_reps;
        fit_reps.reserve(split.fit_count);
        for (std::size_t i = 0; i < split.fit_count; ++i) {
            fit_reps.push_back(reps[order[i]]);
        }
        const std::vector<SignedDiff> signed_diffs = compute_difference_set(fit_reps, split.seed);

        std::vector<std::vector<float>> all_diffs, forward_diffs;
        for (const auto &diff : signed_diffs) {
            all_diffs.push_back(diff.values);
            if (diff.forward) {
                forward_diffs.push_back(diff.values);
            }
        }
        std::vector<float> component;
        try {
            component = pca_first_component(all_diffs);
        } catch (const DegenerateInputError &e) {
            throw DegenerateInputError("layer " + std::to_string(l) + ": " + e.what());
        }
        const std::vector<float> direction = calibrate_direction(component, forward_diffs);

        // each held-out pair scores once in each orientation
        std::vector<SignedDiff> heldout;
        for (std::size_t i = split.fit_count; i < usable; ++i) {
            const auto &rep = reps[order[i]];
            SignedDiff fwd, rev;
            fwd.forward = true;
            rev.forward = false;
            fwd.values.resize(rep.h_pos.size());
            rev.values.resize(rep.h_pos.size());
            for (std::size_t k = 0; k < rep.h_pos.size(); ++k) {
                fwd.values[k] = rep.h_pos[k] - rep.h_neg[k];
                rev.values[k] = -fwd.values[k];
            }
            heldout.push_back(std::move(fwd));
            heldout.push_back(std::move(rev));
        }
        set.meta.val_accuracy[l] = validate_separation(direction, heldout);
        set.per_layer[l] = direction;
    }
    return set;
}

// ---------------------------------------------------------------------------
// SteeringVectorSet IO
// ---------------------------------------------------------------------------

void SteeringVectorSet::save(const std::string &path) const {
    TensorFileWriter writer;
    nlohmann::json meta_json;
    meta_json["model"] = meta.model_name;
    meta_json["model_layers"] = meta.model_layers;
    meta_json["d_model"] = meta.d_model;
    meta_json["fit_pairs"] = meta.fit_pairs;
    meta_json["val_pairs"] = meta.val_pairs;
    meta_json["split_seed"] = meta.split_seed;
    for (const auto &[layer, acc] : meta.val_accuracy) {
        meta_json["accuracy.layer." + std::to_string(layer)] = acc;
    }
    writer.set_metadata(meta_json);
    for (const auto &[layer, values] : per_layer) {
        writer.add("v.layer." + std::to_string(layer),
                   {static_cast<std::int64_t>(values.size())}, values);
    }
    writer.write(path);
}

SteeringVectorSet SteeringVectorSet::load(const std::string &path) {
    TensorFile tf = TensorFile::read(path);
    const nlohmann::json &meta_json = tf.metadata();

    SteeringVectorSet set;
    set.meta.model_name = meta_json.value("model", std::string());
    set.meta.model_layers = meta_json.value("model_layers", 0);
    set.meta.d_model = meta_json.value("d_model", 0);
    set.meta.fit_pairs = meta_json.value("fit_pairs", std::size_t{0});
    set.meta.val_pairs = meta_json.value("val_pairs", std::size_t{0});
    set.meta.split_seed = meta_json.value("split_seed", std::uint64_t{0});

    for (const std::string &name : tf.names()) {
        constexpr std::string_view prefix = "v.layer.";
        if (name.rfind(prefix, 0) != 0) {
            throw FormatError("unexpected tensor '" + name + "' in steering vector file");
        }
        const int layer = std::stoi(name.substr(prefix.size()));
        const LoadedTensor &t = tf.get(name);
        if (t.shape.size() != 1) {
            throw ShapeMismatchError("steering vector '" + name + "' must be rank 1");
        }
        double norm = 0.0;
        for (float x : t.values) {
            norm += static_cast<double>(x) * static_cast<double>(x);
        }
        if (std::abs(std::sqrt(norm) - 1.0) > 1e-6) {
            throw FormatError("steering vector '" + name + "' is not unit norm");
        }
        set.per_layer[layer] = t.values;
        const std::string acc_key = "accuracy.layer." + std::to_string(layer);
        if (meta_json.contains(acc_key)) {
            set.meta.val_accuracy[layer] = meta_json[acc_key].get<double>();
        }
    }
    return set;
}

} // namespace steerkit
