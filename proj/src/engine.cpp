#include "steerkit/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "steerkit/tensorio.hpp"

namespace steerkit {

// ---------------------------------------------------------------------------
// Config validation
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 1 || max_seq_len < 1) {
        throw FormatError("model config: all dimensions must be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw FormatError("model config: n_heads must divide d_model");
    }
    if (!(norm_epsilon > 0.0f)) {
        throw FormatError("model config: norm_epsilon must be positive");
    }
    if (ffn_hidden < 0) {
        throw FormatError("model config: ffn_hidden must be nonnegative");
    }
}

void ProbeSpec::validate(int n_layers) const {
    for (int l : hidden_layers) {
        if (l < 1 || l > n_layers) {
            throw InvalidArgumentError("probe hidden layer " + std::to_string(l) +
                                       " outside [1, " + std::to_string(n_layers) + "]");
        }
    }
    for (int l : early_logit_layers) {
        if (l < 1 || l > n_layers - 1) {
            throw InvalidArgumentError("early logit layer " + std::to_string(l) +
                                       " outside [1, " + std::to_string(n_layers - 1) + "]");
        }
    }
}

void SamplingConfig::validate() const {
    if (temperature < 0.0 || !std::isfinite(temperature)) {
        throw InvalidArgumentError("temperature must be finite and >= 0");
    }
    if (!(top_p > 0.0) || top_p > 1.0) {
        throw InvalidArgumentError("top_p must be in (0, 1]");
    }
    if (max_new_tokens < 0) {
        throw InvalidArgumentError("max_new_tokens must be >= 0");
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {

void require_size(const std::vector<float> &v, std::size_t n, const char *what) {
    if (v.size() != n) {
        throw ShapeMismatchError(std::string(what) + ": got " + std::to_string(v.size()) +
                                 " values, expected " + std::to_string(n));
    }
}

} // namespace

Model::Model(ModelConfig config, std::string name, ModelWeights weights)
    : config_(config), name_(std::move(name)), weights_(std::move(weights)) {
    config_.validate();
    const std::size_t d = static_cast<std::size_t>(config_.d_model);
    const std::size_t v = static_cast<std::size_t>(config_.vocab_size);
    const std::size_t f = static_cast<std::size_t>(config_.ffn_dim());
    require_size(weights_.tok_embed, v * d, "tok_embed");
    require_size(weights_.pos_embed, static_cast<std::size_t>(config_.max_seq_len) * d, "pos_embed");
    require_size(weights_.final_norm, d, "final_norm");
    if (config_.tied_head) {
        if (!weights_.head.empty()) {
            throw ShapeMismatchError("tied head: separate head tensor must be absent");
        }
    } else {
        require_size(weights_.head, v * d, "head");
    }
    if (weights_.layers.size() != static_cast<std::size_t>(config_.n_layers)) {
        throw ShapeMismatchError("layer count mismatch");
    }
    for (const auto &layer : weights_.layers) {
        require_size(layer.attn_norm, d, "attn_norm");
        require_size(layer.wq, d * d, "wq");
        require_size(layer.wk, d * d, "wk");
        require_size(layer.wv, d * d, "wv");
        require_size(layer.wo, d * d, "wo");
        require_size(layer.ffn_norm, d, "ffn_norm");
        require_size(layer.w1, f * d, "ffn.w1");
        require_size(layer.w2, d * f, "ffn.w2");
    }
}

Model Model::load(const std::string &path) {
    TensorFile tf = TensorFile::read(path);
    const nlohmann::json &meta = tf.metadata();
    if (!meta.is_object()) {
        throw FormatError("model file has no __metadata__ object");
    }

    ModelConfig cfg;
    auto need_int = [&](const char *key) {
        if (!meta.contains(key) || !meta[key].is_number()) {
            throw FormatError(std::string("model metadata missing integer key '") + key + "'");
        }
        return meta[key].get<int>();
    };
    cfg.n_layers = need_int("n_layers");
    cfg.d_model = need_int("d_model");
    cfg.n_heads = need_int("n_heads");
    cfg.vocab_size = need_int("vocab_size");
    cfg.max_seq_len = need_int("max_seq_len");
    cfg.norm_epsilon = meta.value("norm_epsilon", 1e-5f);
    cfg.ffn_hidden = meta.value("ffn_hidden", 0);
    cfg.tied_head = meta.value("tied_head", false);
    cfg.eos_token_id = meta.value("eos_token_id", -1);
    const std::string norm = meta.value("final_norm", "rms");
    if (norm == "rms") {
        cfg.final_norm = NormKind::rms;
    } else if (norm == "identity") {
        cfg.final_norm = NormKind::identity;
    } else {
        throw FormatError("unknown final_norm kind '" + norm + "'");
    }
    cfg.validate();

    const std::int64_t d = cfg.d_model;
    const std::int64_t v = cfg.vocab_size;
    const std::int64_t f = cfg.ffn_dim();

    ModelWeights w;
    w.tok_embed = tf.get("tok_embed.weight", {v, d}).values;
    w.pos_embed = tf.get("pos_embed.weight", {cfg.max_seq_len, d}).values;
    w.final_norm = tf.get("final_norm.weight", {d}).values;
    if (!cfg.tied_head) {
        w.head = tf.get("lm_head.weight", {v, d}).values;
    }
    w.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        auto &layer = w.layers[static_cast<std::size_t>(l)];
        layer.attn_norm = tf.get(p + "attn_norm.weight", {d}).values;
        layer.wq = tf.get(p + "attn.wq.weight", {d, d}).values;
        layer.wk = tf.get(p + "attn.wk.weight", {d, d}).values;
        layer.wv = tf.get(p + "attn.wv.weight", {d, d}).values;
        layer.wo = tf.get(p + "attn.wo.weight", {d, d}).values;
        layer.ffn_norm = tf.get(p + "ffn_norm.weight", {d}).values;
        layer.w1 = tf.get(p + "ffn.w1.weight", {f, d}).values;
        layer.w2 = tf.get(p + "ffn.w2.weight", {d, f}).values;
    }

    std::string name = meta.value("name", std::string("model"));
    return Model(cfg, std::move(name), std::move(w));
}

void Model::save(const std::string &path) const {
    TensorFileWriter writer;
    nlohmann::json meta;
    meta["name"] = name_;
    meta["n_layers"] = config_.n_layers;
    meta["d_model"] = config_.d_model;
    meta["n_heads"] = config_.n_heads;
    meta["vocab_size"] = config_.vocab_size;
    meta["max_seq_len"] = config_.max_seq_len;
    meta["norm_epsilon"] = config_.norm_epsilon;
    meta["ffn_hidden"] = config_.ffn_dim();
    meta["tied_head"] = config_.tied_head;
    meta["final_norm"] = config_.final_norm == NormKind::rms ? "rms" : "identity";
    meta["eos_token_id"] = config_.eos_token_id;
    writer.set_metadata(meta);

    const std::int64_t d = config_.d_model;
    const std::int64_t v = config_.vocab_size;
    const std::int64_t f = config_.ffn_dim();
    writer.add("tok_embed.weight", {v, d}, weights_.tok_embed);
    writer.add("pos_embed.weight", {config_.max_seq_len, d}, weights_.pos_embed);
    writer.add("final_norm.weight", {d}, weights_.final_norm);
    if (!config_.tied_head) {
        writer.add("lm_head.weight", {v, d}, weights_.head);
    }
    for (int l = 0; l < config_.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        const auto &layer = weights_.layers[static_cast<std::size_t>(l)];
        writer.add(p + "attn_norm.weight", {d}, layer.attn_norm);
        writer.add(p + "attn.wq.weight", {d, d}, layer.wq);
        writer.add(p + "attn.wk.weight", {d, d}, layer.wk);
        writer.add(p + "attn.wv.weight", {d, d}, layer.wv);
        writer.add(p + "attn.wo.weight", {d, d}, layer.wo);
        writer.add(p + "ffn_norm.weight", {d}, layer.ffn_norm);
        writer.add(p + "ffn.w1.weight", {f, d}, layer.w1);
        writer.add(p + "ffn.w2.weight", {d, f}, layer.w2);
    }
    writer.write(path);
}

// ---------------------------------------------------------------------------
// Forward math (all f32, fixed evaluation order)
// ---------------------------------------------------------------------------

namespace {

void rms_norm(std::span<const float> x, std::span<const float> w, float eps,
              std::span<float> out) {
    float ms = 0.0f;
    for (std::size_t i = 0; i < x.size(); ++i) {
        ms += x[i] * x[i];
    }
    ms /= static_cast<float>(x.size());
    const float inv = 1.0f / std::sqrt(ms + eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv * w[i];
    }
}

// y = W x, W row-major [rows][cols]
void matvec(std::span<const float> w, std::span<const float> x, std::span<float> y) {
    const std::size_t rows = y.size();
    const std::size_t cols = x.size();
    for (std::size_t r = 0; r < rows; ++r) {
        const float *row = w.data() + r * cols;
        float acc = 0.0f;
        for (std::size_t c = 0; c < cols; ++c) {
            acc += row[c] * x[c];
        }
        y[r] = acc;
    }
}

float gelu(float x) {
    return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752440f));
}

} // namespace

std::vector<float> Model::project_to_vocab(std::span<const float> hidden) const {
    const std::size_t d = static_cast<std::size_t>(config_.d_model);
    std::vector<float> normed(d);
    if (config_.final_norm == NormKind::rms) {
        rms_norm(hidden, weights_.final_norm, config_.norm_epsilon, normed);
    } else {
        std::copy(hidden.begin(), hidden.end(), normed.begin());
    }
    const std::vector<float> &head = config_.tied_head ? weights_.tok_embed : weights_.head;
    std::vector<float> logits(static_cast<std::size_t>(config_.vocab_size));
    matvec(head, normed, logits);
    return logits;
}

// ---------------------------------------------------------------------------
// DecodeStream
// ---------------------------------------------------------------------------

DecodeStream::DecodeStream(const Model &model, TokenSequence prompt)
    : model_(&model), context_(std::move(prompt)) {
    const ModelConfig &cfg = model.config();
    if (context_.empty()) {
        throw InvalidArgumentError("context must hold at least one token");
    }
    if (static_cast<int>(context_.size()) > cfg.max_seq_len) {
        throw ContextOverflowError("context of " + std::to_string(context_.size()) +
                                   " tokens exceeds max_seq_len " +
                                   std::to_string(cfg.max_seq_len));
    }
    for (TokenId t : context_) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw InvalidArgumentError("token id " + std::to_string(t) + " outside vocabulary");
        }
    }
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    k_cache_.assign(static_cast<std::size_t>(cfg.n_layers),
                    std::vector<float>(static_cast<std::size_t>(cfg.max_seq_len) * d));
    v_cache_ = k_cache_;
    x_.resize(d);
    normed_.resize(d);
    q_.resize(d);
    k_.resize(d);
    v_.resize(d);
    attn_out_.resize(d);
    proj_.resize(d);
    ffn_a_.resize(static_cast<std::size_t>(cfg.ffn_dim()));
    ffn_b_.resize(d);
    scores_.resize(static_cast<std::size_t>(cfg.max_seq_len));
}

StepOutput DecodeStream::prefill(const LayerHook *hook, const ProbeSpec *probe) {
    if (processed_ != 0) {
        throw InvalidArgumentError("prefill must be the stream's first forward");
    }
    StepOutput out;
    const int n = static_cast<int>(context_.size());
    for (int pos = 0; pos < n; ++pos) {
        const bool last = pos == n - 1;
        // The last prompt position feeds the first sampled token, so it counts
        // as a generation position; earlier ones are context.
        out = forward_position(context_[static_cast<std::size_t>(pos)], pos, last, hook,
                               last ? probe : nullptr);
    }
    return out;
}

StepOutput DecodeStream::step(TokenId token, const LayerHook *hook, const ProbeSpec *probe) {
    if (processed_ != static_cast<int>(context_.size())) {
        throw InvalidArgumentError("step called before prefill");
    }
    if (full()) {
        throw ContextOverflowError("context is at max_seq_len; cannot extend");
    }
    if (token < 0 || token >= model_->config().vocab_size) {
        throw InvalidArgumentError("token id " + std::to_string(token) + " outside vocabulary");
    }
    context_.push_back(token);
    return forward_position(token, static_cast<int>(context_.size()) - 1, true, hook, probe);
}

StepOutput DecodeStream::forward_position(TokenId token, int pos, bool generation_position,
                                          const LayerHook *hook, const ProbeSpec *probe) {
    const ModelConfig &cfg = model_->config();
    const ModelWeights &w = model_->weights();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const int n_heads = cfg.n_heads;
    const int head_dim = cfg.head_dim();
    const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));

    if (probe != nullptr) {
        probe->validate(cfg.n_layers);
    }
    const bool hook_active = hook != nullptr && (generation_position || hook->steer_prefill());

    // x = tok_embed[token] + pos_embed[pos]
    const float *te = w.tok_embed.data() + static_cast<std::size_t>(token) * d;
    const float *pe = w.pos_embed.data() + static_cast<std::size_t>(pos) * d;
    for (std::size_t i = 0; i < d; ++i) {
        x_[i] = te[i] + pe[i];
    }

    StepOutput out;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const int layer_1b = l + 1;
        const auto &layer = w.layers[static_cast<std::size_t>(l)];

        if (hook_active && hook->injection_point() == InjectionPoint::block_input) {
            hook->apply(layer_1b, std::span<float>(x_));
        }

        // attention
        rms_norm(x_, layer.attn_norm, cfg.norm_epsilon, normed_);
        matvec(layer.wq, normed_, q_);
        matvec(layer.wk, normed_, k_);
        matvec(layer.wv, normed_, v_);
        float *kc = k_cache_[static_cast<std::size_t>(l)].data();
        float *vc = v_cache_[static_cast<std::size_t>(l)].data();
        std::copy(k_.begin(), k_.end(), kc + static_cast<std::size_t>(pos) * d);
        std::copy(v_.begin(), v_.end(), vc + static_cast<std::size_t>(pos) * d);

        for (int h = 0; h < n_heads; ++h) {
            const std::size_t off = static_cast<std::size_t>(h) * static_cast<std::size_t>(head_dim);
            const float *qh = q_.data() + off;
            float max_score = -std::numeric_limits<float>::infinity();
            for (int j = 0; j <= pos; ++j) {
                const float *kj = kc + static_cast<std::size_t>(j) * d + off;
                float s = 0.0f;
                for (int i = 0; i < head_dim; ++i) {
                    s += qh[i] * kj[i];
                }
                s *= scale;
                scores_[static_cast<std::size_t>(j)] = s;
                max_score = std::max(max_score, s);
            }
            float denom = 0.0f;
            for (int j = 0; j <= pos; ++j) {
                const float e = std::exp(scores_[static_cast<std::size_t>(j)] - max_score);
                scores_[static_cast<std::size_t>(j)] = e;
                denom += e;
            }
            const float inv = 1.0f / denom;
            for (int i = 0; i < head_dim; ++i) {
                attn_out_[off + static_cast<std::size_t>(i)] = 0.0f;
            }
            for (int j = 0; j <= pos; ++j) {
                const float p = scores_[static_cast<std::size_t>(j)] * inv;
                const float *vj = vc + static_cast<std::size_t>(j) * d + off;
                for (int i = 0; i < head_dim; ++i) {
                    attn_out_[off + static_cast<std::size_t>(i)] += p * vj[i];
                }
            }
        }
        matvec(layer.wo, attn_out_, proj_);
        for (std::size_t i = 0; i < d; ++i) {
            x_[i] += proj_[i];
        }

        // feed-forward
        rms_norm(x_, layer.ffn_norm, cfg.norm_epsilon, normed_);
        matvec(layer.w1, normed_, ffn_a_);
        for (float &a : ffn_a_) {
            a = gelu(a);
        }
        matvec(layer.w2, ffn_a_, ffn_b_);
        for (std::size_t i = 0; i < d; ++i) {
            x_[i] += ffn_b_[i];
        }

        if (hook_active && hook->injection_point() == InjectionPoint::block_output) {
            hook->apply(layer_1b, std::span<float>(x_));
        }

        if (probe != nullptr) {
            if (probe->hidden_layers.count(layer_1b)) {
                out.probed_hidden[layer_1b] = x_;
            }
            if (probe->early_logit_layers.count(layer_1b)) {
                out.early_logits[layer_1b] = model_->project_to_vocab(x_);
            }
        }
    }

    out.final_logits = model_->project_to_vocab(x_);
    for (float v : out.final_logits) {
        if (!std::isfinite(v)) {
            throw NonFiniteActivationError("non-finite logit at position " + std::to_string(pos));
        }
    }
    processed_ = pos + 1;
    return out;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

std::vector<double> softmax_with_temperature(std::span<const float> logits, double temperature) {
    if (logits.empty()) {
        throw InvalidArgumentError("softmax on empty logits");
    }
    if (temperature < 0.0 || !std::isfinite(temperature)) {
        throw InvalidArgumentError("temperature must be finite and >= 0");
    }
    for (float v : logits) {
        if (!std::isfinite(v)) {
            throw InvalidArgumentError("softmax requires finite logits");
        }
    }
    std::vector<double> probs(logits.size(), 0.0);
    if (temperature == 0.0) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < logits.size(); ++i) {
            if (logits[i] > logits[best]) {
                best = i;
            }
        }
        probs[best] = 1.0;
        return probs;
    }
    double max_logit = -std::numeric_limits<double>::infinity();
    for (float v : logits) {
        max_logit = std::max(max_logit, static_cast<double>(v));
    }
    double denom = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double e = std::exp((static_cast<double>(logits[i]) - max_logit) / temperature);
        probs[i] = e;
        denom += e;
    }
    for (double &p : probs) {
        p /= denom;
    }
    return probs;
}

TokenId sample_token(std::span<const double> probs, double top_p, Rng &rng) {
    if (probs.empty()) {
        throw InvalidArgumentError("sample from empty distribution");
    }
    if (!(top_p > 0.0) || top_p > 1.0) {
        throw InvalidArgumentError("top_p must be in (0, 1]");
    }
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0)) {
            throw InvalidArgumentError("probabilities must be nonnegative");
        }
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
        throw InvalidArgumentError("probabilities must sum to 1");
    }

    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (probs[a] != probs[b]) {
            return probs[a] > probs[b];
        }
        return a < b;
    });

    // Inclusive cutoff, with a hair of slack so exact-threshold prefixes
    // survive decimal-rounding in the cumulative sum.
    std::size_t nucleus = 0;
    double cum = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        cum += probs[order[i]];
        nucleus = i + 1;
        if (cum >= top_p - 1e-12) {
            break;
        }
    }

    double mass = 0.0;
    for (std::size_t i = 0; i < nucleus; ++i) {
        mass += probs[order[i]];
    }
    const double u = rng.uniform01() * mass;
    double acc = 0.0;
    for (std::size_t i = 0; i < nucleus; ++i) {
        acc += probs[order[i]];
        if (u < acc) {
            return static_cast<TokenId>(order[i]);
        }
    }
    return static_cast<TokenId>(order[nucleus - 1]);
}

// ---------------------------------------------------------------------------
// forward_step / generate
// ---------------------------------------------------------------------------

StepOutput forward_step(const Model &model, const TokenSequence &context, const LayerHook *hook,
                        const ProbeSpec &probe) {
    DecodeStream stream(model, context);
    return stream.prefill(hook, &probe);
}

Generation generate(const Model &model, const TokenSequence &prompt, const SamplingConfig &sampling,
                    const LayerHook *hook, const ProbeSpec *probe, const StepCallback &on_step) {
    sampling.validate();
    if (prompt.empty()) {
        throw InvalidArgumentError("prompt must be nonempty");
    }

    Generation gen;
    gen.prompt = prompt;
    if (sampling.max_new_tokens == 0) {
        return gen;
    }

    DecodeStream stream(model, prompt);
    Rng rng(sampling.seed);
    const TokenId eos = model.config().eos_token_id;

    StepOutput out = stream.prefill(hook, probe);
    for (int t = 0; t < sampling.max_new_tokens; ++t) {
        const std::vector<double> probs = softmax_with_temperature(out.final_logits, sampling.temperature);
        const TokenId token = sample_token(probs, sampling.top_p, rng);
        gen.tokens.push_back(token);

        if (probe != nullptr || on_step) {
            StepRecord rec;
            rec.index = t;
            rec.token = token;
            if (probe != nullptr) {
                rec.output = out;
            }
            if (on_step) {
                on_step(rec);
            }
            if (probe != nullptr) {
                gen.steps.push_back(std::move(rec));
            }
        }

        if (eos >= 0 && token == eos) {
            gen.hit_eos = true;
            break;
        }
        if (t + 1 >= sampling.max_new_tokens) {
            break;
        }
        if (stream.full()) {
            gen.truncated = true;
            break;
        }
        out = stream.step(token, hook, probe);
    }
    gen.total_generated = static_cast<std::int64_t>(gen.tokens.size());
    return gen;
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
    // splitmix64 over the concatenated inputs
    std::uint64_t z = base;
    for (std::uint64_t word : {a, b}) {
        z += 0x9e3779b97f4a7c15ULL + word;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        z = z ^ (z >> 31);
    }
    return z;
}

} // namespace steerkit
