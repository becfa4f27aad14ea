#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "ctxrank/crossenc.hpp"
#include "ctxrank/error.hpp"
#include "ctxrank/textprep.hpp"
#include "fixtures.hpp"
#include "toy_model.hpp"

using namespace ctxrank;

namespace {

constexpr int CLS = SubwordVocab::cls_id;
constexpr int SEP = SubwordVocab::sep_id;
constexpr int PAD = SubwordVocab::pad_id;

EncoderConfig small_config() {
    EncoderConfig c;
    c.layers = 2;
    c.hidden = 16;
    c.heads = 4;
    c.ffn = 32;
    c.max_len = 24;
    c.vocab = 30;
    c.dropout = 0.1;
    c.max_query_len = 6;
    return c;
}

bool same_tensors(const EncoderParams& a, const EncoderParams& b) {
    std::vector<Matrix> ta, tb;
    a.for_each([&](std::string_view, const Matrix& m) { ta.push_back(m); });
    b.for_each([&](std::string_view, const Matrix& m) { tb.push_back(m); });
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i)
        if (ta[i].rows() != tb[i].rows() || ta[i].cols() != tb[i].cols() || ta[i] != tb[i]) return false;
    return true;
}

std::vector<LabeledEncoding> random_dataset(std::mt19937_64& rng, const EncoderConfig& c, std::size_t n) {
    std::vector<LabeledEncoding> data;
    for (std::size_t i = 0; i < n; ++i) data.push_back({toy::random_encoding(rng, c), static_cast<int>(i % 2)});
    return data;
}

}  // namespace

TEST(Encode, PairLayout) {
    EncoderConfig c = small_config();
    c.max_len = 16;
    std::vector<int> q{10, 11}, p{20, 21, 22};
    auto e = encode_pair(q, p, c);
    EXPECT_EQ(e.length, 8);
    EXPECT_FALSE(e.truncated);
    ASSERT_EQ(e.token_ids.size(), 16u);
    EXPECT_EQ(std::vector<int>(e.token_ids.begin(), e.token_ids.begin() + 8),
              (std::vector<int>{CLS, 10, 11, SEP, 20, 21, 22, SEP}));
    EXPECT_EQ(std::vector<int>(e.segment_ids.begin(), e.segment_ids.begin() + 8),
              (std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1}));
    for (int i = 8; i < 16; ++i) {
        EXPECT_EQ(e.token_ids[i], PAD);
        EXPECT_EQ(e.attention_mask[i], 0);
    }
    for (int i = 0; i < 8; ++i) EXPECT_EQ(e.attention_mask[i], 1);
    for (int i = 0; i < 16; ++i) EXPECT_EQ(e.position_ids[i], i);
}

TEST(Encode, EmptyPassageIsValid) {
    auto c = small_config();
    std::vector<int> q{10}, none;
    auto e = encode_pair(q, none, c);
    EXPECT_EQ(e.length, 4);
    EXPECT_EQ(std::vector<int>(e.token_ids.begin(), e.token_ids.begin() + 4), (std::vector<int>{CLS, 10, SEP, SEP}));
    auto params = init_params(c, 1);
    double p = forward(params, e).probability;
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
    EXPECT_THROW(encode_pair(none, q, c), DataError);
}

TEST(Encode, OverflowCutsQueryThenPassage) {
    auto c = small_config();  // S = 24, query cap 6
    std::mt19937_64 rng(1);
    auto q = toy::random_ids(rng, 10, c.vocab);
    auto p = toy::random_ids(rng, 40, c.vocab);
    auto e = encode_pair(q, p, c);
    EXPECT_TRUE(e.truncated);
    EXPECT_EQ(e.length, c.max_len);
    EXPECT_EQ(e.token_ids[7], SEP);  // CLS + 6 query tokens
    EXPECT_EQ(e.token_ids[c.max_len - 1], SEP);
    EXPECT_EQ(e.token_ids[8], p[0]);
    // A long query next to a short passage is kept whole.
    std::vector<int> shortp{5, 6};
    auto f = encode_pair(q, shortp, c);
    EXPECT_FALSE(f.truncated);
    EXPECT_EQ(f.length, 1 + 10 + 1 + 2 + 1);
}

TEST(Config, Validation) {
    auto c = small_config();
    EXPECT_NO_THROW(c.validate());
    auto bad = c;
    bad.heads = 3;
    EXPECT_THROW(bad.validate(), UsageError);
    bad = c;
    bad.dropout = 1.0;
    EXPECT_THROW(bad.validate(), UsageError);
    bad = c;
    bad.max_query_len = c.max_len - 2;
    EXPECT_THROW(bad.validate(), UsageError);
    nlohmann::json j = c;
    EXPECT_EQ(j.get<EncoderConfig>(), c);
}

TEST(Forward, ProbabilityRangeAndAttentionRows) {
    auto c = small_config();
    auto params = init_params(c, 3, 0.2);
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        auto e = toy::random_encoding(rng, c);
        auto r = forward(params, e, {.capture_attention = true});
        EXPECT_GT(r.probability, 0.0);
        EXPECT_LT(r.probability, 1.0);
        EXPECT_NEAR(r.probability, 1.0 / (1.0 + std::exp(-r.logit)), 1e-15);
        ASSERT_TRUE(r.attention.has_value());
        ASSERT_EQ(r.attention->matrices.size(), static_cast<std::size_t>(c.layers * c.heads));
        for (const auto& m : r.attention->matrices) {
            ASSERT_EQ(m.rows(), e.length);
            for (int i = 0; i < m.rows(); ++i) EXPECT_NEAR(m.row(i).sum(), 1.0, 1e-6);
            EXPECT_GE(m.minCoeff(), 0.0);
        }
    }
}

TEST(Forward, PaddingTailDoesNotMatter) {
    auto c = small_config();
    auto params = init_params(c, 4, 0.2);
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto e = toy::random_encoding(rng, c);
        double trimmed = forward(params, e).probability;
        auto noisy = e;
        for (int i = e.length; i < c.max_len; ++i) {
            noisy.token_ids[i] = static_cast<int>(rng() % c.vocab);
            noisy.segment_ids[i] = static_cast<int>(rng() % 2);
        }
        EXPECT_NEAR(forward(params, noisy, {.trim_padding = false}).probability, trimmed, 1e-9);
        auto shorter = e;
        std::size_t keep = e.length + rng() % (c.max_len - e.length + 1);
        for (auto* v : {&shorter.token_ids, &shorter.segment_ids, &shorter.position_ids, &shorter.attention_mask})
            v->resize(keep);
        EXPECT_NEAR(forward(params, shorter, {.trim_padding = false}).probability, trimmed, 1e-9);
    }
}

TEST(Forward, RejectsMalformedEncodings) {
    auto c = small_config();
    auto params = init_params(c, 4);
    std::vector<int> q{10}, p{11};
    auto e = encode_pair(q, p, c);
    auto gap = e;
    gap.attention_mask[1] = 0;
    EXPECT_THROW(forward(params, gap), DataError);
    auto oov = e;
    oov.token_ids[1] = c.vocab;
    EXPECT_THROW(forward(params, oov), DataError);
    auto nan = params;
    nan.classifier_b(0, 0) = std::nan("");
    EXPECT_THROW(forward(nan, e), NumericError);
}

TEST(Loss, ClosedForms) {
    auto c = small_config();
    auto params = init_params(c, 5);
    params.classifier_w.setZero();
    params.classifier_b.setZero();
    std::vector<int> q{10}, p{11, 12};
    std::vector<LabeledEncoding> batch{{encode_pair(q, p, c), 1}};
    EXPECT_NEAR(loss_and_gradients(params, batch).loss, std::log(2.0), 1e-12);
    params.classifier_b(0, 0) = 30.0;
    EXPECT_LT(loss_and_gradients(params, batch).loss, 1e-12);
    EXPECT_THROW(loss_and_gradients(params, std::span<const LabeledEncoding>()), DataError);
    batch[0].label = 2;
    EXPECT_THROW(loss_and_gradients(params, batch), DataError);
}

TEST(GradientCheck, TinyModelSampled) {
    auto c = toy::tiny_config();
    auto params = init_params(c, 6, 0.3);
    std::mt19937_64 rng(4);
    auto e = toy::random_encoding(rng, c);
    auto r = gradient_check(params, e, 1, {.epsilon = 1e-5, .coords_per_tensor = 6, .seed = 1});
    EXPECT_LE(r.max_relative_error, 1e-4) << r.worst_tensor;
    EXPECT_GT(r.coordinates_checked, 100u);
}

TEST(GradientCheck, InvalidStepAndSymmetricError) {
    auto c = toy::tiny_config();
    auto params = init_params(c, 6);
    std::vector<int> q{10}, p{11};
    auto e = encode_pair(q, p, c);
    EXPECT_THROW(gradient_check(params, e, 1, {.epsilon = 0.0}), UsageError);
    EXPECT_THROW(gradient_check(params, e, 1, {.epsilon = -1e-5}), UsageError);
    EXPECT_DOUBLE_EQ(relative_error(0.3, 0.5), relative_error(0.5, 0.3));
    EXPECT_DOUBLE_EQ(relative_error(3.0, 4.0), 0.25);
    EXPECT_DOUBLE_EQ(relative_error(1e-9, 2e-9), 1e-9);
}

TEST(Train, ZeroStepsLeaveParamsUnchanged) {
    auto c = small_config();
    auto params = init_params(c, 7);
    std::mt19937_64 rng(5);
    auto data = random_dataset(rng, c, 8);
    TrainOptions o;
    o.steps = 0;
    auto r = train(params, data, o);
    EXPECT_TRUE(same_tensors(r.params, params));
    EXPECT_TRUE(r.loss_curve.empty());
}

TEST(Train, SameSeedSameCurve) {
    auto c = small_config();
    auto params = init_params(c, 7);
    std::mt19937_64 rng(5);
    auto data = random_dataset(rng, c, 12);
    TrainOptions o;
    o.steps = 15;
    o.batch = 4;
    o.seed = 99;
    auto a = train(params, data, o);
    auto b = train(params, data, o);
    EXPECT_EQ(a.loss_curve, b.loss_curve);
    EXPECT_TRUE(same_tensors(a.params, b.params));
    o.seed = 100;
    EXPECT_NE(train(params, data, o).loss_curve, a.loss_curve);
}

TEST(Train, LossDecreasesOnSmallSet) {
    auto c = small_config();
    std::mt19937_64 rng(8);
    auto data = random_dataset(rng, c, 8);
    auto params = init_params(c, 9);
    double before = dataset_loss(params, data);
    TrainOptions o;
    o.steps = 150;
    o.batch = 8;
    o.lr = 3e-3;
    auto r = train(params, data, o);
    EXPECT_LT(dataset_loss(r.params, data), before * 0.5);
}

TEST(Train, InvalidInputs) {
    auto c = small_config();
    auto params = init_params(c, 1);
    TrainOptions o;
    EXPECT_THROW(train(params, std::span<const LabeledEncoding>(), o), DataError);
    std::mt19937_64 rng(1);
    auto data = random_dataset(rng, c, 2);
    o.batch = 0;
    EXPECT_THROW(train(params, data, o), UsageError);
    o.batch = 2;
    o.lr = 1e300;
    o.clip_norm = 0;
    o.steps = 50;
    EXPECT_THROW(train(params, data, o), NumericError);
}

TEST(Masking, RatesAndTargets) {
    auto c = small_config();
    std::mt19937_64 rng(9);
    auto ids = toy::random_ids(rng, 20, c.vocab);
    auto e = encode_sequence(ids, c);
    EXPECT_THROW(mask_tokens(e, 0.0, 1), UsageError);
    EXPECT_THROW(mask_tokens(e, 1.0, 1), UsageError);
    auto m = mask_tokens(e, 0.15, 1);
    EXPECT_EQ(m.positions.size(), 3u);  // round(0.15 * 20)
    for (std::size_t i = 0; i < m.positions.size(); ++i) {
        EXPECT_EQ(m.targets[i], e.token_ids[m.positions[i]]);
        EXPECT_FALSE(SubwordVocab(reserved_tokens()).is_special(m.targets[i]));
    }
    auto always = mask_tokens(e, 0.5, 2, true);
    for (int pos : always.positions) EXPECT_EQ(always.encoding.token_ids[pos], SubwordVocab::mask_id);
    std::vector<std::vector<int>> seqs{ids};
    PretrainOptions zero;
    zero.mask_rate = 0.0;
    EXPECT_THROW(pretrain_masked(c, seqs, zero), UsageError);
}

TEST(Pretrain, RepetitiveCorpusIsLearned) {
    auto c = small_config();
    c.dropout = 0.0;
    c.max_len = 32;
    std::vector<std::vector<int>> seqs;
    for (int s = 0; s < 16; ++s) {
        std::vector<int> seq;
        for (int i = 0; i < 27; ++i) seq.push_back(10 + (i + s) % 3);  // "a b c a b c ..."
        seqs.push_back(seq);
    }
    PretrainOptions o;
    o.mask_rate = 0.15;
    o.train.steps = 500;
    o.train.batch = 8;
    o.train.lr = 3e-3;
    o.train.seed = 3;
    // A wider initialization leaves the uniform-prediction plateau sooner.
    auto r = pretrain_masked(init_params(c, 3, 0.1), seqs, o);
    double acc = masked_accuracy(r.params, seqs, 0.15, 12345);
    EXPECT_GT(acc, 0.9);
    EXPECT_GT(acc, 1.0 / c.vocab);
    auto again = pretrain_masked(init_params(c, 3, 0.1), seqs, o);
    EXPECT_EQ(again.loss_curve, r.loss_curve);
}

TEST(Finetune, CopiesEncoderAndDrawsFreshHead) {
    auto c = small_config();
    auto pre = init_params(c, 10, 0.1);
    auto a = init_for_finetune(pre, c, 1);
    auto b = init_for_finetune(pre, c, 2);
    std::map<std::string, Matrix> pm;
    pre.for_each([&](std::string_view name, const Matrix& m) { pm[std::string(name)] = m; });
    a.for_each([&](std::string_view name, const Matrix& m) {
        if (is_head_tensor(name)) {
            if (!is_bias_like(name)) {
                EXPECT_NE(m, pm.at(std::string(name))) << name;
            }
        } else {
            EXPECT_EQ(m, pm.at(std::string(name))) << name;
        }
    });
    EXPECT_NE(a.pooler_w, b.pooler_w);
    EXPECT_NE(a.classifier_w, b.classifier_w);
    EXPECT_EQ(a.token_embedding, b.token_embedding);
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        auto e = toy::random_encoding(rng, c);
        EXPECT_EQ(encode_hidden(a, e), encode_hidden(pre, e));
    }
    auto other = small_config();
    other.hidden = 32;
    EXPECT_THROW(init_for_finetune(pre, other, 1), DataError);
}

TEST(Checkpoint, RoundTripAndCorruption) {
    auto c = small_config();
    auto params = init_params(c, 12);
    fixtures::TempDir dir("ctxrank-ckpt");
    save_checkpoint(dir.path() / "m.ckpt", params);
    auto back = load_checkpoint(dir.path() / "m.ckpt");
    EXPECT_EQ(back.config, c);
    EXPECT_TRUE(same_tensors(back, params));
    std::stringstream buf;
    save_checkpoint(buf, params);
    std::string bytes = buf.str();
    std::stringstream truncated(bytes.substr(0, bytes.size() - 16));
    EXPECT_THROW(load_checkpoint(truncated), DataError);
    std::stringstream junk("NOTACKPT....");
    EXPECT_THROW(load_checkpoint(junk), DataError);
    EXPECT_THROW(load_checkpoint(dir.path() / "missing.ckpt"), DataError);
}
