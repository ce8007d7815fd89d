#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "steerkit/errors.hpp"
#include "steerkit/vocab.hpp"

namespace steerkit {

// ---------------------------------------------------------------------------
// Configuration and per-step outputs
// ---------------------------------------------------------------------------

enum class NormKind { rms, identity };

struct ModelConfig {
    int n_layers = 0;
    int d_model = 0;
    int n_heads = 0;
    int vocab_size = 0;
    int max_seq_len = 0;
    float norm_epsilon = 1e-5f;

    // Extras the file header may carry beyond the core dimensions.
    int ffn_hidden = 0;         // 0 -> 4 * d_model
    bool tied_head = false;     // vocab head shares the token embedding
    NormKind final_norm = NormKind::rms;
    TokenId eos_token_id = -1;  // -1: generation only stops at the length cap

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
    int ffn_dim() const { return ffn_hidden > 0 ? ffn_hidden : 4 * d_model; }
};

// Layer indices are 1-based throughout: layer l is the residual-stream output
// of the l-th block; the embedding output is "layer 0" and is not probeable.
struct ProbeSpec {
    std::set<int> hidden_layers;      // subset of [1, N]
    std::set<int> early_logit_layers; // subset of [1, N-1]

    void validate(int n_layers) const;
};

struct StepOutput {
    std::vector<float> final_logits;                 // [vocab_size]
    std::map<int, std::vector<float>> probed_hidden; // layer -> hidden at last position
    std::map<int, std::vector<float>> early_logits;  // layer -> head(final_norm(h^l))
};

struct SamplingConfig {
    double temperature = 0.6; // 0 means greedy (argmax, lowest index on ties)
    double top_p = 0.95;      // in (0, 1]
    std::uint64_t seed = 0;
    int max_new_tokens = 128;

    void validate() const;
};

// ---------------------------------------------------------------------------
// Hook surface
// ---------------------------------------------------------------------------

enum class InjectionPoint { block_output, block_input };

// Per-layer intervention surface. The engine calls apply() once per processed
// layer at every position the hook covers; implementations decide per layer
// whether (and how) to edit the hidden values in place.
class LayerHook {
  public:
    virtual ~LayerHook() = default;

    // true: also intervene on context (prompt) positions, not only on the
    // positions whose logits sample a token.
    virtual bool steer_prefill() const { return false; }

    virtual InjectionPoint injection_point() const { return InjectionPoint::block_output; }

    virtual void apply(int layer, std::span<float> hidden) const = 0;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ModelWeights {
    struct Layer {
        std::vector<float> attn_norm;      // [d]
        std::vector<float> wq, wk, wv, wo; // [d, d] row-major [out][in]
        std::vector<float> ffn_norm;       // [d]
        std::vector<float> w1;             // [ffn, d]
        std::vector<float> w2;             // [d, ffn]
    };
    std::vector<float> tok_embed;  // [V, d]
    std::vector<float> pos_embed;  // [max_seq, d]
    std::vector<float> final_norm; // [d]
    std::vector<float> head;       // [V, d]; empty when tied
    std::vector<Layer> layers;
};

// Decoder-only transformer: pre-norm blocks, RMS normalization, learned
// absolute position embeddings, GELU feed-forward, tied or untied vocab head.
// Immutable after construction and safe to share across generation streams.
class Model {
  public:
    Model(ModelConfig config, std::string name, ModelWeights weights);

    static Model load(const std::string &path);
    void save(const std::string &path) const;

    const ModelConfig &config() const { return config_; }
    const std::string &name() const { return name_; }
    const ModelWeights &weights() const { return weights_; }

    // head(final_norm(hidden)): shared by the final and early logit paths.
    std::vector<float> project_to_vocab(std::span<const float> hidden) const;

  private:
    ModelConfig config_;
    std::string name_;
    ModelWeights weights_;
};

// ---------------------------------------------------------------------------
// Decode state (one per generation stream; single-threaded)
// ---------------------------------------------------------------------------

class DecodeStream {
  public:
    DecodeStream(const Model &model, TokenSequence prompt);

    // Process all prompt positions. The hook touches context positions only
    // when it opts into prefill; the last prompt position feeds the first
    // sampled token and is always in scope. Call exactly once, first.
    StepOutput prefill(const LayerHook *hook, const ProbeSpec *probe);

    // Append one sampled token and process its position.
    StepOutput step(TokenId token, const LayerHook *hook, const ProbeSpec *probe);

    int length() const { return static_cast<int>(context_.size()); }
    bool full() const { return length() >= model_->config().max_seq_len; }
    const TokenSequence &context() const { return context_; }

  private:
    StepOutput forward_position(TokenId token, int pos, bool generation_position,
                                const LayerHook *hook, const ProbeSpec *probe);

    const Model *model_;
    TokenSequence context_;
    int processed_ = 0;
    // KV cache, [layer][pos * d_model + i]
    std::vector<std::vector<float>> k_cache_;
    std::vector<std::vector<float>> v_cache_;
    // scratch
    std::vector<float> x_, normed_, q_, k_, v_, attn_out_, proj_, ffn_a_, ffn_b_;
    std::vector<float> scores_;
};

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// Deterministic stream RNG; uniform01 uses the 53-bit construction so draws
// do not depend on the standard library's distribution implementation.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}
    double uniform01() {
        const std::uint64_t a = gen_() >> 11; // 53 bits
        return static_cast<double>(a) * (1.0 / 9007199254740992.0);
    }

  private:
    std::mt19937_64 gen_;
};

// Temperature 0 yields a one-hot at the argmax (ties to the lowest index).
// Probabilities are computed and returned in double precision so downstream
// divergence math keeps its tolerances.
std::vector<double> softmax_with_temperature(std::span<const float> logits, double temperature);

// Nucleus sampling with an inclusive cutoff: the token whose cumulative mass
// first reaches top_p stays in the candidate set.
TokenId sample_token(std::span<const double> probs, double top_p, Rng &rng);

// ---------------------------------------------------------------------------
// Single-step and full generation
// ---------------------------------------------------------------------------

// One full forward over `context`, returning next-token logits plus probes for
// the last position. Bit-identical across repeated calls on identical input.
StepOutput forward_step(const Model &model, const TokenSequence &context, const LayerHook *hook,
                        const ProbeSpec &probe);

struct StepRecord {
    int index = 0; // 0-based position within the generated region
    TokenId token = -1;
    StepOutput output; // populated when a probe was given
};

using StepCallback = std::function<void(const StepRecord &)>;

struct Generation {
    TokenSequence prompt;
    TokenSequence tokens;
    bool hit_eos = false;
    bool truncated = false; // ran out of context, or a baseline gave up early
    // Cumulative generated-token cost, including tokens injected by baselines
    // (forced suffixes, reflection cues). Equals tokens.size() for plain runs.
    std::int64_t total_generated = 0;
    std::vector<StepRecord> steps; // filled when a probe was given

    std::string text(const Vocabulary &vocab) const { return vocab.decode(tokens); }
};

Generation generate(const Model &model, const TokenSequence &prompt, const SamplingConfig &sampling,
                    const LayerHook *hook = nullptr, const ProbeSpec *probe = nullptr,
                    const StepCallback &on_step = {});

// Stable per-(task, sample) seed derivation for experiment fan-out.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

} // namespace steerkit
