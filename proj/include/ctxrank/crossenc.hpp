#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace ctxrank {

using Matrix = Eigen::MatrixXd;

struct EncoderConfig {
    int layers = 2;
    int hidden = 64;
    int heads = 4;
    int ffn = 128;
    int max_len = 128;
    int vocab = 2048;
    double dropout = 0.1;
    /// Queries longer than this are cut before the passage is.
    int max_query_len = 32;

    int head_dim() const { return hidden / heads; }
    void validate() const;
    bool operator==(const EncoderConfig&) const = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

enum Segment : int { segment_query = 0, segment_doc = 1 };

/// Model input: `[CLS] q... [SEP] p... [SEP]` padded with [PAD] to max_len.
struct InputEncoding {
    std::vector<int> token_ids;
    std::vector<int> segment_ids;
    std::vector<int> position_ids;
    std::vector<int> attention_mask;
    int length = 0;
    bool truncated = false;
};

/// Lays out a query/passage pair. When the pair does not fit, the query is
/// first cut to `max_query_len`, then the passage is cut from its end.
InputEncoding encode_pair(std::span<const int> query_ids, std::span<const int> passage_ids,
                          const EncoderConfig& config);

struct LayerParams {
    Matrix wq, bq, wk, bk, wv, bv, wo, bo;
    Matrix ln1_gain, ln1_bias;
    Matrix w1, b1, w2, b2;
    Matrix ln2_gain, ln2_bias;
};

/// Every learnable tensor. Weights multiply row vectors from the right
/// (x * W), so W1 is hidden x ffn. Biases and gains are 1 x n rows. The
/// masked-LM output projection is the transposed token embedding plus
/// `mlm_bias`.
struct EncoderParams {
    EncoderConfig config;
    Matrix token_embedding;     // V x H
    Matrix segment_embedding;   // 2 x H
    Matrix position_embedding;  // S x H
    Matrix emb_ln_gain, emb_ln_bias;
    std::vector<LayerParams> layers;
    Matrix pooler_w, pooler_b;          // H x H, 1 x H
    Matrix classifier_w, classifier_b;  // H x 1, 1 x 1
    Matrix mlm_bias;                    // 1 x V

    /// Visits (name, tensor) in a fixed order.
    template <typename F>
    void for_each(F&& f) {
        visit(*this, f);
    }
    template <typename F>
    void for_each(F&& f) const {
        visit(*this, f);
    }

    /// Same shapes, all zeros.
    static EncoderParams zeros(const EncoderConfig& config);
    std::size_t parameter_count() const;

  private:
    template <typename Self, typename F>
    static void visit(Self& p, F& f) {
        f(std::string_view("token_embedding"), p.token_embedding);
        f(std::string_view("segment_embedding"), p.segment_embedding);
        f(std::string_view("position_embedding"), p.position_embedding);
        f(std::string_view("emb_ln_gain"), p.emb_ln_gain);
        f(std::string_view("emb_ln_bias"), p.emb_ln_bias);
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            auto& L = p.layers[l];
            const std::string pre = "layer" + std::to_string(l) + ".";
            f(std::string_view(pre + "wq"), L.wq);
            f(std::string_view(pre + "bq"), L.bq);
            f(std::string_view(pre + "wk"), L.wk);
            f(std::string_view(pre + "bk"), L.bk);
            f(std::string_view(pre + "wv"), L.wv);
            f(std::string_view(pre + "bv"), L.bv);
            f(std::string_view(pre + "wo"), L.wo);
            f(std::string_view(pre + "bo"), L.bo);
            f(std::string_view(pre + "ln1_gain"), L.ln1_gain);
            f(std::string_view(pre + "ln1_bias"), L.ln1_bias);
            f(std::string_view(pre + "w1"), L.w1);
            f(std::string_view(pre + "b1"), L.b1);
            f(std::string_view(pre + "w2"), L.w2);
            f(std::string_view(pre + "b2"), L.b2);
            f(std::string_view(pre + "ln2_gain"), L.ln2_gain);
            f(std::string_view(pre + "ln2_bias"), L.ln2_bias);
        }
        f(std::string_view("pooler_w"), p.pooler_w);
        f(std::string_view("pooler_b"), p.pooler_b);
        f(std::string_view("classifier_w"), p.classifier_w);
        f(std::string_view("classifier_b"), p.classifier_b);
        f(std::string_view("mlm_bias"), p.mlm_bias);
    }
};

/// True for the relevance head (pooler + classifier), which fine-tuning
/// re-initializes.
bool is_head_tensor(std::string_view name);
/// True for biases and layer-norm parameters.
bool is_bias_like(std::string_view name);

/// Gaussian weights with standard deviation `init_std`, zero biases, unit
/// layer-norm gains.
EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed, double init_std = 0.02);

/// Copies the encoder verbatim and draws a fresh relevance head.
EncoderParams init_for_finetune(const EncoderParams& pretrained, const EncoderConfig& config,
                                std::uint64_t seed, double init_std = 0.02);

/// Row-stochastic attention matrices over the unmasked prefix, one per
/// (layer, head), stored layer-major.
struct AttentionTrace {
    int layers = 0;
    int heads = 0;
    std::vector<int> token_ids;
    std::vector<Matrix> matrices;

    const Matrix& at(int layer, int head) const { return matrices.at(static_cast<std::size_t>(layer * heads + head)); }
};

struct ForwardOptions {
    bool capture_attention = false;
    /// Evaluate only the unmasked prefix. With false, every padded position
    /// is carried through the network and excluded by the attention mask.
    bool trim_padding = true;
};

struct ForwardResult {
    double probability = 0.0;
    /// Pre-logistic relevance score.
    double logit = 0.0;
    std::optional<AttentionTrace> attention;
};

/// Inference-mode forward pass (no dropout).
ForwardResult forward(const EncoderParams& params, const InputEncoding& encoding,
                      const ForwardOptions& options = {});

/// Final-layer hidden states of the unmasked prefix (length x hidden).
Matrix encode_hidden(const EncoderParams& params, const InputEncoding& encoding);

struct LabeledEncoding {
    InputEncoding encoding;
    int label = 0;
};

struct LossResult {
    double loss = 0.0;
    EncoderParams gradients;
    /// Examples whose probability had to be clamped before the log.
    std::size_t clamped = 0;
};

/// Mean binary cross-entropy over the batch and its exact gradient.
/// `dropout_seed` enables training-mode dropout.
LossResult loss_and_gradients(const EncoderParams& params, std::span<const LabeledEncoding> batch,
                              std::optional<std::uint64_t> dropout_seed = std::nullopt);

/// Relative error |a - n| / max(1, |a|, |n|).
double relative_error(double analytic, double numeric);

struct GradientCheckOptions {
    double epsilon = 1e-5;
    /// Weight-matrix coordinates sampled per tensor; 0 checks every one.
    /// Bias-like tensors are always checked in full.
    std::size_t coords_per_tensor = 0;
    std::uint64_t seed = 0;
};

struct GradientCheckResult {
    double max_relative_error = 0.0;
    std::string worst_tensor;
    std::size_t coordinates_checked = 0;
};

/// Compares analytic gradients of the single-example loss with central
/// differences.
GradientCheckResult gradient_check(const EncoderParams& params, const InputEncoding& encoding,
                                   int label, const GradientCheckOptions& options = {});

struct TrainOptions {
    double lr = 1e-3;
    std::size_t steps = 100;
    std::size_t batch = 8;
    std::uint64_t seed = 1;
    double weight_decay = 0.0;
    /// Global gradient-norm clip; 0 disables.
    double clip_norm = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::function<void(std::size_t step, double loss)> on_step;
};

struct TrainResult {
    EncoderParams params;
    std::vector<double> loss_curve;
};

/// Adam over shuffled mini-batches; bitwise reproducible for a given seed
/// and data order.
TrainResult train(EncoderParams params, std::span<const LabeledEncoding> data,
                  const TrainOptions& options);

/// Mean loss over a dataset in inference mode.
double dataset_loss(const EncoderParams& params, std::span<const LabeledEncoding> data);

struct MaskedExample {
    InputEncoding encoding;       // with masked tokens substituted
    std::vector<int> positions;   // masked positions
    std::vector<int> targets;     // original ids at those positions
};

struct MlmLossResult {
    double loss = 0.0;
    EncoderParams gradients;
};

/// Mean token cross-entropy over all masked positions in the batch.
MlmLossResult mlm_loss_and_gradients(const EncoderParams& params, std::span<const MaskedExample> batch,
                                     std::optional<std::uint64_t> dropout_seed = std::nullopt);

/// Encodes a token sequence as a pair by splitting it in half, so both
/// segment embeddings take part in pretraining.
InputEncoding encode_sequence(std::span<const int> ids, const EncoderConfig& config);

/// Masks `rate` of the non-special tokens (at least one): 80% become [MASK],
/// 10% a random non-special id, 10% stay.
MaskedExample mask_tokens(const InputEncoding& encoding, double rate, std::uint64_t seed,
                          bool always_mask_token = false);

struct PretrainOptions {
    double mask_rate = 0.15;
    TrainOptions train;
};

/// Masked-token pretraining over token sequences. The relevance head is
/// left as initialized.
TrainResult pretrain_masked(const EncoderConfig& config, std::span<const std::vector<int>> sequences,
                            const PretrainOptions& options);

/// Continues masked-token training from existing parameters.
TrainResult pretrain_masked(EncoderParams params, std::span<const std::vector<int>> sequences,
                            const PretrainOptions& options);

/// Fraction of masked positions whose argmax prediction is the original token.
double masked_accuracy(const EncoderParams& params, std::span<const std::vector<int>> sequences,
                       double rate, std::uint64_t seed);

void save_checkpoint(std::ostream& out, const EncoderParams& params);
EncoderParams load_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const EncoderParams& params);
EncoderParams load_checkpoint(const std::filesystem::path& path);

}  // namespace ctxrank
