#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>

#include "sgpt/sgpt.hpp"

using namespace sgpt;

namespace {

ModelConfig grad_check_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq = 32;
    return cfg;
}

std::vector<int> tokens_of(const std::string& s) {
    std::vector<int> t;
    for (unsigned char c : s) t.push_back(c);
    return t;
}

TokenStream repeated_byte_corpus(uint8_t byte, size_t len) {
    TokenStream ts;
    ts.id = "constant";
    ts.bytes.assign(len, byte);
    return ts;
}

}  // namespace

TEST_CASE("grad_check: analytic backward matches central differences") {
    Checkpoint ckpt = init_checkpoint(grad_check_config(), 1234);
    std::vector<int> toks = tokens_of("the quick brown fox");
    double err = grad_check(ckpt, toks, 100, 1e-3);
    CHECK(err < 1e-4);
}

TEST_CASE("grad_check: works on a tied-embedding model too") {
    ModelConfig cfg = grad_check_config();
    cfg.tie_embeddings = true;
    Checkpoint ckpt = init_checkpoint(cfg, 7);
    double err = grad_check(ckpt, tokens_of("tied weights"), 60, 1e-3);
    CHECK(err < 1e-4);
}

TEST_CASE("gradients: disconnected parameter gets exactly zero") {
    Checkpoint ckpt = init_checkpoint(grad_check_config(), 5);
    // byte 255 never appears in the inputs, so its embedding row has no
    // path to the loss
    std::vector<int> toks = tokens_of("abcabc");
    std::vector<int> inputs(toks.begin(), toks.end() - 1);
    std::vector<int> targets(toks.begin() + 1, toks.end());
    GradMapT<float> grads = zero_grads_like(ckpt);
    loss_and_grad(ckpt, inputs, targets, grads);
    const Tensor& demb = grads.at(names::embedding);
    for (int j = 0; j < ckpt.config.d_model; ++j)
        CHECK(demb.at(255, j) == 0.0f);
}

TEST_CASE("gradients: doubling the loss doubles every component") {
    Checkpoint ckpt = init_checkpoint(grad_check_config(), 6);
    std::vector<int> toks = tokens_of("scaling");
    std::vector<int> inputs(toks.begin(), toks.end() - 1);
    std::vector<int> targets(toks.begin() + 1, toks.end());
    GradMapT<float> g1 = zero_grads_like(ckpt), g2 = zero_grads_like(ckpt);
    loss_and_grad(ckpt, inputs, targets, g1, 1.0);
    loss_and_grad(ckpt, inputs, targets, g2, 2.0);
    for (const auto& [name, t] : g1)
        for (size_t i = 0; i < t.data.size(); ++i)
            CHECK(g2.at(name).data[i] == 2.0f * t.data[i]);
}

TEST_CASE("train: memorizes a constant byte stream") {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.max_seq = 32;
    TrainConfig tc;
    tc.steps = 250;
    tc.batch_size = 4;
    tc.seq_len = 16;
    tc.learning_rate = 3e-3;
    tc.seed = 3;
    TrainResult res = train(init_checkpoint(cfg, 3), repeated_byte_corpus('x', 4096), tc);
    CHECK(res.losses.back() < 0.01);
}

TEST_CASE("train: deterministic given the seed") {
    ModelConfig cfg = grad_check_config();
    TrainConfig tc;
    tc.steps = 12;
    tc.batch_size = 2;
    tc.seq_len = 16;
    tc.seed = 99;
    TokenStream corpus = repeated_byte_corpus('a', 2048);
    for (size_t i = 100; i < corpus.bytes.size(); i += 3) corpus.bytes[i] = 'b';
    TrainResult r1 = train(init_checkpoint(cfg, 11), corpus, tc);
    TrainResult r2 = train(init_checkpoint(cfg, 11), corpus, tc);
    CHECK(r1.losses == r2.losses);
    for (const auto& [name, t] : r1.checkpoint.tensors)
        CHECK(bits_equal(t, r2.checkpoint.tensors.at(name)));
}

TEST_CASE("train: zero learning rate leaves the checkpoint bit-identical") {
    ModelConfig cfg = grad_check_config();
    Checkpoint before = init_checkpoint(cfg, 17);
    TrainConfig tc;
    tc.steps = 5;
    tc.batch_size = 2;
    tc.seq_len = 8;
    tc.learning_rate = 0.0;
    tc.seed = 1;
    TrainResult res = train(before, repeated_byte_corpus('q', 512), tc);
    for (const auto& [name, t] : before.tensors)
        CHECK(bits_equal(t, res.checkpoint.tensors.at(name)));
}

TEST_CASE("train: non-finite loss aborts naming the step") {
    ModelConfig cfg = grad_check_config();
    Checkpoint ckpt = init_checkpoint(cfg, 2);
    ckpt.tensor(names::embedding).at('z', 0) = std::numeric_limits<float>::quiet_NaN();
    TrainConfig tc;
    tc.steps = 3;
    tc.batch_size = 1;
    tc.seq_len = 8;
    tc.seed = 0;
    CHECK_THROWS_WITH_AS(train(ckpt, repeated_byte_corpus('z', 512), tc),
                         doctest::Contains("step 0"), std::runtime_error);
}

TEST_CASE("train: corpus shorter than a window is rejected") {
    TrainConfig tc;
    tc.steps = 1;
    tc.seq_len = 16;
    CHECK_THROWS_AS(train(init_checkpoint(grad_check_config(), 1),
                          repeated_byte_corpus('a', 10), tc),
                    std::invalid_argument);
}

TEST_CASE("adam: an all-zero gradient step changes nothing") {
    Checkpoint ckpt = init_checkpoint(grad_check_config(), 23);
    Checkpoint before = ckpt;
    AdamState state = init_adam(ckpt);
    GradMapT<float> grads = zero_grads_like(ckpt);
    TrainConfig tc;
    adam_step(ckpt, grads, state, tc);
    for (const auto& [name, t] : before.tensors)
        CHECK(bits_equal(t, ckpt.tensors.at(name)));
}

TEST_CASE("train: improves held-out loss on natural text") {
    const char* corpus_path = std::getenv("SGPT_CORPUS");
    REQUIRE(corpus_path != nullptr);
    TokenStream corpus = load_token_stream(corpus_path);
    REQUIRE(corpus.size() >= (1u << 20));

    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.max_seq = 64;
    Checkpoint init = init_checkpoint(cfg, 31);

    TokenStream train_part = corpus.slice(0, corpus.size() / 2, ":train");
    TokenStream held_out = corpus.slice(corpus.size() / 2, 1 << 14, ":heldout");

    EvalReport before = perplexity(init, held_out, 64);
    TrainConfig tc;
    tc.steps = 120;
    tc.batch_size = 8;
    tc.seq_len = 64;
    tc.learning_rate = 2e-3;
    tc.seed = 31;
    TrainResult res = train(init, train_part, tc);
    EvalReport after = perplexity(res.checkpoint, held_out, 64);

    CHECK(after.perplexity * 2.0 < before.perplexity);
    CHECK(res.checkpoint.metadata.count("train.seed") == 1);
}
