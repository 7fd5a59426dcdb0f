#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "dvlm/decoder.hpp"
#include "dvlm/e2e_bridge.hpp"

using namespace dvlm;
using Var = Graph<double>::Var;

namespace {

Vocabulary toy_vocab() {
    std::vector<std::string> corpus = {
        "Go straight , constant speed .",
        "What is the ego vehicle doing ?",
        "<c1,CAM_FRONT,800,450> is a car",
        "Yes No there are objects near the ego vehicle",
    };
    for (const auto& s : e2e_prompt_symbols()) corpus.push_back(s);
    return build_vocabulary(corpus);
}

DecoderConfig tiny_dec(InjectionMode mode = InjectionMode::input_tokens) {
    DecoderConfig cfg;
    cfg.layers = 2;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.d_ff = 32;
    cfg.max_text_len = 32;
    cfg.injection = mode;
    return cfg;
}

BranchRoute any_route() { return route(Task::perception, QType::open, PLoRAMode::task); }

}  // namespace

TEST_CASE("vocabulary reserves control ids and round-trips text") {
    Vocabulary v = toy_vocab();
    REQUIRE(v.symbol(Vocabulary::kBos) == "<bos>");
    REQUIRE(v.symbol(Vocabulary::kEos) == "<eos>");
    REQUIRE(v.symbol(Vocabulary::kPad) == "<pad>");
    REQUIRE(v.symbol(Vocabulary::kE2eOpen) == "<e2e>");
    REQUIRE(v.symbol(Vocabulary::kE2eClose) == "</e2e>");
    REQUIRE(v.symbol(Vocabulary::kImgOpen) == "<img>");
    REQUIRE(v.symbol(Vocabulary::kImgClose) == "</img>");
    REQUIRE(v.symbol(Vocabulary::kUnk) == "<unk>");

    REQUIRE(v.tokenize("").empty());
    REQUIRE(v.detokenize({}).empty());

    std::string text = "Go straight , constant speed .";
    REQUIRE(v.detokenize(v.tokenize(text)) == text);

    auto tag_ids = v.tokenize("<c1,CAM_FRONT,800,450>");
    REQUIRE(tag_ids.size() == 1);
    REQUIRE(tag_ids[0] != Vocabulary::kUnk);

    REQUIRE(v.id_of("7") != Vocabulary::kUnk);
    REQUIRE(v.id_of("zeppelin") == Vocabulary::kUnk);
    REQUIRE(v.detokenize({Vocabulary::kUnk}) == "<unk>");
}

TEST_CASE("vocabulary files survive a save/load round trip") {
    Vocabulary v = toy_vocab();
    std::string path = "vocab_test_tmp.txt";
    v.save(path);
    Vocabulary w = Vocabulary::load(path);
    REQUIRE(w.size() == v.size());
    REQUIRE(w.id_of("straight") == v.id_of("straight"));
    REQUIRE(w.id_of("<c1,CAM_FRONT,800,450>") == v.id_of("<c1,CAM_FRONT,800,450>"));
    REQUIRE(w.fingerprint() == v.fingerprint());

    Vocabulary bigger = v;
    bigger.add_symbol("zeppelin");
    REQUIRE(bigger.fingerprint() != v.fingerprint());

    REQUIRE_THROWS_AS(Vocabulary::load("no_such_vocab_file.txt"), IoError);
    std::remove(path.c_str());
}

TEST_CASE("question-answer encoding masks exactly the answer targets") {
    Vocabulary v = toy_vocab();
    // question = 2 in-vocab words, answer = 2 words
    EncodedQA enc = encode_qa(v, "What is", "Go straight");
    REQUIRE(enc.ids.size() == 6);
    REQUIRE(enc.ids.front() == Vocabulary::kBos);
    REQUIRE(enc.ids.back() == Vocabulary::kEos);
    REQUIRE(enc.answer_start == 3);
    // positions whose next token is an answer token or the closing EOS
    REQUIRE(enc.loss_mask == std::vector<uint8_t>{0, 0, 1, 1, 1, 0});

    auto prompt = encode_prompt(v, "What is");
    REQUIRE(prompt.size() == 3);
    REQUIRE(prompt[0] == Vocabulary::kBos);
}

TEST_CASE("decoder logits are causal over text positions") {
    Vocabulary v = toy_vocab();
    Decoder<double> dec(tiny_dec(), v.size());
    ParamStore<double> ps(41);
    dec.register_params(ps);

    std::vector<int> ids = encode_qa(v, "What is the ego vehicle doing ?", "Go straight").ids;
    auto run = [&](const std::vector<int>& text) {
        Graph<double> g;
        Binder<double> bind(g, ps);
        TokenSequence<double> seq;
        seq.text_ids = text;
        seq.loss_mask.assign(text.size(), 0);
        auto logits = dec.forward(bind, seq, nullptr, any_route());
        return g.value(logits);
    };
    Mat<double> base = run(ids);
    for (size_t t : {size_t(4), ids.size() - 2}) {
        auto mod = ids;
        mod[t] = v.id_of("car");
        REQUIRE(mod[t] != ids[t]);
        Mat<double> pert = run(mod);
        // positions before t see identical inputs: bitwise-equal logits
        for (size_t r = 0; r < t; ++r)
            for (int c = 0; c < base.cols; ++c)
                REQUIRE(pert.at(static_cast<int>(r), c) == base.at(static_cast<int>(r), c));
        // the changed position itself feels the change
        double diff = 0;
        for (int c = 0; c < base.cols; ++c)
            diff = std::max(diff, std::abs(pert.at(static_cast<int>(t), c) -
                                           base.at(static_cast<int>(t), c)));
        REQUIRE(diff > 0.0);
    }
}

TEST_CASE("both injection modes emit identically shaped logits") {
    Vocabulary v = toy_vocab();
    ParamStore<double> ps(43);
    Decoder<double> dec_in(tiny_dec(InjectionMode::input_tokens), v.size());
    dec_in.register_params(ps);
    Decoder<double> dec_ad(tiny_dec(InjectionMode::adapter), v.size());

    Rng rng(7);
    Mat<double> vis = Mat<double>::gaussian(5, 16, 1.0, rng);
    Mat<double> e2e = Mat<double>::gaussian(7, 16, 1.0, rng);
    std::vector<int> ids = encode_prompt(v, "What is the ego vehicle doing ?");

    auto shape_of = [&](const Decoder<double>& dec) {
        Graph<double> g;
        Binder<double> bind(g, ps);
        TokenSequence<double> seq;
        seq.vision = g.constant(vis);
        seq.e2e = g.constant(e2e);
        seq.text_ids = ids;
        seq.loss_mask.assign(ids.size(), 0);
        auto logits = dec.forward(bind, seq, nullptr, any_route());
        return std::pair<int, int>{logits.rows, logits.cols};
    };
    auto s1 = shape_of(dec_in);
    auto s2 = shape_of(dec_ad);
    REQUIRE(s1 == s2);
    REQUIRE(s1.first == static_cast<int>(ids.size()));
    REQUIRE(s1.second == v.size());
}

TEST_CASE("zero-init gates make adapter injection initially inert") {
    Vocabulary v = toy_vocab();
    ParamStore<double> ps(44);
    Decoder<double> dec(tiny_dec(InjectionMode::adapter), v.size());
    dec.register_params(ps);

    std::vector<int> ids = encode_prompt(v, "What is the ego vehicle doing ?");
    Rng rng(9);
    Mat<double> vis = Mat<double>::gaussian(4, 16, 1.0, rng);

    auto run = [&](bool with_prefix) {
        Graph<double> g;
        Binder<double> bind(g, ps);
        TokenSequence<double> seq;
        if (with_prefix) seq.vision = g.constant(vis);
        seq.text_ids = ids;
        seq.loss_mask.assign(ids.size(), 0);
        return g.value(dec.forward(bind, seq, nullptr, any_route()));
    };
    REQUIRE(max_abs_diff(run(true), run(false)) == 0.0);

    // once a gate opens, the prefix matters
    ps.get("dec.b0.gate").value.at(0, 0) = 0.5;
    REQUIRE(max_abs_diff(run(true), run(false)) > 0.0);
    ps.get("dec.b0.gate").value.at(0, 0) = 0.0;
}

TEST_CASE("task visibility filters driving tokens before the decoder") {
    Vocabulary vocab = toy_vocab();
    SceneGraph scene = [] {
        GenConfig gc;
        gc.min_objects = 3;
        gc.max_objects = 5;
        return gen_scene(31, gc);
    }();
    E2EConfig ecfg;
    ecfg.n_ins = 3;
    ecfg.d = 16;
    ecfg.heads = 2;
    ParamStore<double> ps(45);
    Decoder<double> dec(tiny_dec(), vocab.size());
    dec.register_params(ps);
    register_e2e(ps, ecfg);

    auto full = synthetic_backbone<double>(scene, 0.1, 3, ecfg.d);
    auto sel = select_top_instances(full, ecfg.n_ins, &ps);
    auto sel_mot_perturbed = sel;
    sel_mot_perturbed.instances[0].f_mot.at(0, 2) += 1.0;

    std::vector<int> ids = encode_prompt(vocab, "What is the ego vehicle doing ?");
    auto run = [&](const E2EBackboneOutput<double>& s, Task task) {
        Graph<double> g;
        Binder<double> bind(g, ps);
        auto asm_ = assemble_e2e_tokens(bind, ecfg, vocab, scene, s, false);
        BranchRoute r = route(task, QType::open, PLoRAMode::task);
        TokenSequence<double> seq;
        seq.e2e = visible_e2e_rows(g, asm_, r.visible);
        seq.text_ids = ids;
        seq.loss_mask.assign(ids.size(), 0);
        return g.value(dec.forward(bind, seq, nullptr, r));
    };

    // outside the visible set: mot content cannot reach perception logits
    REQUIRE(max_abs_diff(run(sel, Task::perception), run(sel_mot_perturbed, Task::perception)) ==
            0.0);
    // inside the visible set it does
    REQUIRE(max_abs_diff(run(sel, Task::prediction), run(sel_mot_perturbed, Task::prediction)) >
            0.0);
    // and the filtered prefix itself changes the logits across routes
    REQUIRE(max_abs_diff(run(sel, Task::perception), run(sel, Task::planning)) > 0.0);
}

TEST_CASE("greedy generation is deterministic, prefix-stable, and EOS-biased-empty") {
    Vocabulary v = toy_vocab();
    ParamStore<double> ps(46);
    Decoder<double> dec(tiny_dec(), v.size());
    dec.register_params(ps);
    BranchRoute r = any_route();

    auto ids1 = generate_ids<double>(dec, ps, nullptr, r, nullptr,
                                     encode_prompt(v, "What is the ego vehicle doing ?"), 8);
    auto ids2 = generate_ids<double>(dec, ps, nullptr, r, nullptr,
                                     encode_prompt(v, "What is the ego vehicle doing ?"), 8);
    REQUIRE(ids1 == ids2);

    size_t prompt_len = encode_prompt(v, "What is the ego vehicle doing ?").size();
    REQUIRE(ids1.size() > prompt_len);
    if (ids1.size() > prompt_len + 1) {
        std::vector<int> mid(ids1.begin(), ids1.begin() + static_cast<long>(prompt_len) + 1);
        auto replay = generate_ids<double>(dec, ps, nullptr, r, nullptr, mid, 7);
        REQUIRE(replay == ids1);
    }

    // a dominant EOS bias ends generation immediately: empty answer
    ps.get("dec.out.b").value.at(0, Vocabulary::kEos) = 50.0;
    REQUIRE(generate<double>(dec, ps, nullptr, r, nullptr, v, "What is the ego vehicle doing ?",
                             8) == "");
    ps.get("dec.out.b").value.at(0, Vocabulary::kEos) = 0.0;
}

TEST_CASE("malformed sequences are rejected with shape errors") {
    Vocabulary v = toy_vocab();
    ParamStore<double> ps(47);
    Decoder<double> dec(tiny_dec(), v.size());
    dec.register_params(ps);
    BranchRoute r = any_route();

    Graph<double> g;
    Binder<double> bind(g, ps);
    TokenSequence<double> seq;
    seq.text_ids = encode_prompt(v, "What is");
    seq.loss_mask.assign(seq.text_ids.size(), 0);

    TokenSequence<double> bad_width = seq;
    bad_width.vision = g.constant(Mat<double>::zeros(3, 8));  // decoder width is 16
    REQUIRE_THROWS_AS(dec.forward(bind, bad_width, nullptr, r), ShapeError);

    TokenSequence<double> bad_mask = seq;
    bad_mask.loss_mask.pop_back();
    REQUIRE_THROWS_AS(dec.forward(bind, bad_mask, nullptr, r), ShapeError);

    TokenSequence<double> bad_id = seq;
    bad_id.text_ids[1] = v.size() + 5;
    REQUIRE_THROWS_AS(dec.forward(bind, bad_id, nullptr, r), ShapeError);

    TokenSequence<double> too_long = seq;
    too_long.text_ids.assign(100, v.id_of("car"));
    too_long.loss_mask.assign(100, 0);
    REQUIRE_THROWS_AS(dec.forward(bind, too_long, nullptr, r), ShapeError);

    TokenSequence<double> empty;
    REQUIRE_THROWS_AS(dec.forward(bind, empty, nullptr, r), ShapeError);
}

TEST_CASE("routed decoder branches receive isolated gradients") {
    Vocabulary v = toy_vocab();
    PLoRAConfig pcfg;
    pcfg.mode = PLoRAMode::task;
    pcfg.rank = 2;
    PLoRABank<double> bank(pcfg);
    ParamStore<double> ps(48);
    Decoder<double> dec(tiny_dec(), v.size());
    dec.register_params(ps, &bank);

    BranchRoute r = route(Task::perception, QType::open, PLoRAMode::task);
    Graph<double> g;
    Binder<double> bind(g, ps);
    TokenSequence<double> seq;
    seq.text_ids = encode_prompt(v, "What is the ego vehicle doing ?");
    seq.loss_mask.assign(seq.text_ids.size(), 0);
    auto logits = dec.forward(bind, seq, &bank, r);
    g.backward(g.sum_all(logits));

    auto grad_norm = [&](const std::string& name) {
        double s = 0;
        for (double x : ps.get(name).grad.a) s += std::abs(x);
        return s;
    };
    // the routed branch's low-rank B factors move; other branches stay silent
    REQUIRE(grad_norm("dec.b0.ff.plora.perception.up.B") > 0.0);
    REQUIRE(grad_norm("dec.b0.ff.plora.perception.down.B") > 0.0);
    for (const char* other : {"prediction", "planning"}) {
        for (const char* leg : {"up", "down"})
            for (const char* fac : {"A", "B"})
                REQUIRE(grad_norm("dec.b0.ff.plora." + std::string(other) + "." + leg + "." +
                                  fac) == 0.0);
    }
    // shared attention adapters participate on every route
    REQUIRE(grad_norm("dec.b0.sa.lshared.q.B") > 0.0);
    REQUIRE(grad_norm("dec.b0.sa.lshared.v.B") > 0.0);
}
