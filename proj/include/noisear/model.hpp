#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "noisear/gaussian.hpp"
#include "noisear/patch_codec.hpp"
#include "noisear/rng.hpp"

namespace noisear {

struct ModelConfig {
    TensorShape shape;
    std::size_t d_model = 256;
    std::size_t n_heads = 8;
    std::size_t n_decoder_layers = 1;
    std::size_t n_head_layers = 1;
    std::size_t ffn_mult = 4;
    std::size_t vocab_size = 16;
    std::size_t cond_max_len = 8;
    double log_var_clamp_lo = -10.0;
    double log_var_clamp_hi = 10.0;
    std::uint64_t seed = 0;

    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Integer token sequence standing in for an encoded text prompt.
struct Condition {
    std::vector<std::uint32_t> tokens;
};

// Name/shape/offset entry into the flat parameter vector.
struct TensorEntry {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

// Activation record of one teacher-forced forward pass, kept for backward.
struct Tape;

// KV cache for incremental decoding.
struct DecodeCache;

// All learnable weights live in one flat vector, addressed through a tensor
// table; Adam state, checkpointing, and finite differencing all work on the
// flat view.
class Model {
public:
    explicit Model(const ModelConfig& config);

    static Model init_params(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const std::vector<TensorEntry>& tensor_table() const { return table_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    std::size_t num_params() const { return params_.size(); }

    // Condition token vectors: embedding row plus sinusoidal position.
    std::vector<std::vector<double>> encode_condition(const Condition& c) const;

    // Teacher-forced pass: params[j] describes patch j+1 given patches <= j.
    // When tape is non-null the activations needed by backward() are recorded.
    std::vector<GaussianParams> forward_teacher_forced(const PatchSequence& s,
                                                       const Condition& c,
                                                       Tape* tape = nullptr) const;

    // Accumulate d(loss)/d(params) into grad given d(loss)/d(mean, log_var).
    // d_mean/d_log_var are M x K, row-major by patch.
    void backward(const Tape& tape, const std::vector<double>& d_mean,
                  const std::vector<double>& d_log_var,
                  std::vector<double>& grad) const;

    DecodeCache begin_decode(const Condition& c) const;

    // Feed the next token (none for the start token) and get the params
    // predicted for the following patch. Rejects steps past patch M.
    GaussianParams decode_step(DecodeCache& cache,
                               const std::vector<double>* prev_patch) const;

    // Convenience: params for the patch following a prefix, no cache reuse.
    GaussianParams forward_incremental(const std::vector<std::vector<double>>& prefix,
                                       const Condition& c) const;

    GaussianParams predict_params(const std::vector<double>& hidden) const;

    // Test fixture: disable the causal mask to prove the audit catches leaks.
    void set_causal_mask_enabled(bool enabled) { causal_mask_ = enabled; }
    bool causal_mask_enabled() const { return causal_mask_; }

private:
    void build_table();
    void validate_condition(const Condition& c) const;

    ModelConfig config_;
    std::vector<TensorEntry> table_;
    std::vector<double> params_;
    std::vector<double> positional_;       // (M+1) x d_model
    std::vector<double> cond_positional_;  // cond_max_len x d_model
    bool causal_mask_ = true;
};

// Tape definition is public so loss code can own one across forward/backward.
struct Tape {
    std::size_t seq_len = 0;   // M + 1 tokens
    std::size_t cond_len = 0;
    std::vector<std::uint32_t> cond_tokens;
    std::vector<double> patches;  // M x K ground-truth inputs
    std::vector<double> cond_u;   // L x d condition vectors
    std::vector<double> x0;       // (M+1) x d embedded input

    struct Layer {
        std::vector<double> x_in;        // S x d
        std::vector<double> ln1_mean, ln1_rstd, a1;
        std::vector<double> q, k, v;     // S x d
        std::vector<double> probs;       // h x S x S
        std::vector<double> attn_concat; // S x d (pre output projection)
        std::vector<double> x_self;      // S x d (after self-attn residual)
        std::vector<double> ln2_mean, ln2_rstd, a2;
        std::vector<double> cq, ck, cv;  // S x d, L x d, L x d
        std::vector<double> cprobs;      // h x S x L
        std::vector<double> cattn_concat;
        std::vector<double> x_cross;
        std::vector<double> ln3_mean, ln3_rstd, a3;
        std::vector<double> ffn_pre;     // S x dff (pre-activation)
        std::vector<double> ffn_act;     // S x dff
    };
    std::vector<Layer> layers;
    std::vector<double> x_final;  // S x d decoder output

    // Head activations for positions 0..M-1.
    std::vector<std::vector<double>> head_pre;  // per head layer: M x d pre-activation
    std::vector<double> raw_out;                // M x 2K pre-clamp head output
};

struct DecodeCache {
    std::size_t pos = 0;  // tokens consumed so far (start token included)
    std::vector<double> cond_u;            // L x d
    struct Layer {
        std::vector<double> k, v;          // growing, pos x d
        std::vector<double> ck, cv;        // L x d, fixed
    };
    std::vector<Layer> layers;
    Condition cond;
};

}  // namespace noisear
