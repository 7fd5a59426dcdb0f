// Operator surface: dataset generation, training, evaluation, single-scene
// inference, and artifact introspection. Exit codes: 0 success, 1 usage
// error, 2 runtime abort.
#include <chrono>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dvlm/config.hpp"
#include "dvlm/dataset.hpp"

namespace fs = std::filesystem;
using namespace dvlm;

namespace {

std::string timestamp() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    localtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return buf;
}

std::string hex64(uint64_t v) {
    std::ostringstream os;
    os << "0x" << std::hex << v;
    return os.str();
}

// Resolves the run directory (timestamped when not specified), creates it,
// and dumps the effective configuration into it.
void open_run_dir(RunConfig& rc, const std::string& cmd) {
    if (rc.out.empty()) rc.out = "runs/" + cmd + "-" + timestamp();
    std::error_code ec;
    fs::create_directories(rc.out, ec);
    if (ec && !fs::is_directory(rc.out))
        throw IoError("cannot create output directory: " + rc.out);
    std::ofstream os(fs::path(rc.out) / "effective_config.json");
    if (!os) throw IoError("cannot write effective config in " + rc.out);
    os << rc.to_json().dump(2) << "\n";
}

// --data may name a dataset directory (uses <dir>/<split>.jsonl) or point at
// a record file directly.
std::string data_file(const std::string& data, const char* split) {
    if (data.size() >= 6 && data.compare(data.size() - 6, 6, ".jsonl") == 0) return data;
    return data + "/" + std::string(split) + ".jsonl";
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int run_gen_data(RunConfig rc) {
    ModelConfig mc = model_config_from(rc);
    rc.n_ins = mc.e2e.n_ins;  // resolve the preset sentinel before dumping
    open_run_dir(rc, "gen-data");
    GenConfig gc = mc.gen;

    std::vector<QARecord> all;
    for (int i = 0; i < rc.scenes; ++i) {
        int64_t scene_seed = static_cast<int64_t>(rc.seed) + i;
        auto recs = gen_qa(gen_scene(scene_seed, gc));
        all.insert(all.end(), recs.begin(), recs.end());
    }
    auto [train, val] = split_records(all, rc.split);
    write_records(data_file(rc.out, "train"), train);
    write_records(data_file(rc.out, "val"), val);

    nlohmann::json manifest = {{"scenes", rc.scenes},
                               {"first_seed", rc.seed},
                               {"split", rc.split},
                               {"preset", rc.preset},
                               {"counts", dataset_manifest(all)},
                               {"train", dataset_manifest(train)},
                               {"val", dataset_manifest(val)}};
    std::ofstream mf(fs::path(rc.out) / "manifest.json");
    if (!mf) throw IoError("cannot write dataset manifest in " + rc.out);
    mf << manifest.dump(2) << "\n";

    std::cout << "wrote " << all.size() << " records from " << rc.scenes << " scenes ("
              << train.size() << " train / " << val.size() << " val) to " << rc.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int run_train(RunConfig rc) {
    if (rc.data.empty()) throw ConfigError("train requires --data");
    ModelConfig mc = model_config_from(rc);
    rc.n_ins = mc.e2e.n_ins;  // resolve the preset sentinel before dumping
    open_run_dir(rc, "train");

    auto records = read_records(data_file(rc.data, "train"));
    auto corpus = corpus_texts(records);
    for (const auto& s : e2e_prompt_symbols()) corpus.push_back(s);
    Vocabulary vocab = build_vocabulary(corpus);

    Model<double> model(mc, std::move(vocab));
    TrainConfig tc = train_config_from(rc);

    nlohmann::json extra_meta = {{"run_config", rc.to_json()}};
    std::string ck_dir = (fs::path(rc.out) / "checkpoints").string();
    std::string log_path = (fs::path(rc.out) / "train_log.jsonl").string();
    FitResult res = fit(model, records, tc, ck_dir, log_path, extra_meta);

    std::vector<double> totals;
    for (const auto& e : res.log) totals.push_back(e.rep.total);
    write_svg_line((fs::path(rc.out) / "loss_curve.svg").string(), "training loss", totals);

    std::cout << "trained " << res.steps_run << " steps on " << records.size() << " records\n";
    if (!res.log.empty()) {
        const auto& last = res.log.back().rep;
        std::cout << "final losses: l_txt " << last.l_txt << "  l_e2e " << last.l_e2e
                  << "  total " << last.total << "\n";
    }
    if (!res.last_checkpoint.empty())
        std::cout << "checkpoint: " << res.last_checkpoint << "\n";
    std::cout << "log: " << log_path << "\n";

    if (res.aborted) {
        std::cerr << "error: training aborted: " << res.message << "\n";
        return 2;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// checkpoint loading shared by eval / infer / inspect
// ---------------------------------------------------------------------------

struct LoadedCheckpoint {
    RunConfig train_rc;  // run configuration recorded at training time
    nlohmann::json meta;
    std::unique_ptr<Model<double>> model;
};

LoadedCheckpoint load_model_checkpoint(const std::string& dir) {
    if (dir.empty()) throw ConfigError("a checkpoint directory is required (--checkpoint)");
    LoadedCheckpoint lc;
    lc.meta = read_checkpoint_meta(dir);
    Vocabulary vocab = Vocabulary::load((fs::path(dir) / "vocab.txt").string());
    if (!lc.meta.contains("vocab_fingerprint"))
        throw IoError("checkpoint manifest lacks a vocabulary fingerprint: " + dir);
    uint64_t fp_file = vocab.fingerprint();
    uint64_t fp_meta = lc.meta["vocab_fingerprint"].get<uint64_t>();
    if (fp_file != fp_meta)
        throw IoError("vocabulary mismatch with checkpoint: vocab.txt hash " + hex64(fp_file) +
                      " vs manifest hash " + hex64(fp_meta));
    if (lc.meta.contains("run_config")) lc.train_rc.apply_json(lc.meta["run_config"]);
    ModelConfig mc = model_config_from(lc.train_rc);
    lc.model = std::make_unique<Model<double>>(mc, std::move(vocab));
    load_checkpoint(dir, lc.model->ps);
    return lc;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int run_eval(RunConfig rc) {
    if (rc.data.empty()) throw ConfigError("eval requires --data");
    auto lc = load_model_checkpoint(rc.checkpoint);
    auto records = read_records(data_file(rc.data, "val"));
    open_run_dir(rc, "eval");

    EvalOptions opts = eval_options_from(rc);
    EvalResult res = evaluate(*lc.model, records, opts);

    auto j = eval_to_json(res);
    j["checkpoint"] = rc.checkpoint;
    std::ofstream rep(fs::path(rc.out) / "report.json");
    if (!rep) throw IoError("cannot write report in " + rc.out);
    rep << j.dump(2) << "\n";

    std::string table = eval_table(res);
    std::ofstream tf(fs::path(rc.out) / "report.txt");
    tf << table;
    write_metrics_svg((fs::path(rc.out) / "metrics.svg").string(), res);

    std::cout << table;
    std::cout << "report: " << (fs::path(rc.out) / "report.json").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

int run_infer(RunConfig rc) {
    auto lc = load_model_checkpoint(rc.checkpoint);
    Model<double>& m = *lc.model;

    auto scene = gen_scene(rc.scene_seed, m.cfg.gen);
    auto recs = gen_qa(scene);
    auto res = cot_pipeline(m, recs, rc.use_cot, rc.max_new, rc.detach);

    std::ostringstream ts;
    ts << "scene " << rc.scene_seed << ": " << scene.objects.size() << " objects, "
       << res.answers.front().record.identities.size() << " important\n";

    // Driving-token view of this scene: group layout and the text prompts
    // that were mixed into the prompted tokens.
    auto ctx = prepare_record(m, recs.front());
    Graph<double> g;
    Binder<double> bind(g, m.ps);
    auto assembly = assemble_e2e_tokens(bind, m.cfg.e2e, m.vocab, ctx.scene, ctx.sel, rc.detach);
    if (rc.dump_tokens) {
        ts << "driving tokens: " << assembly.groups.size() << " (2*" << m.cfg.e2e.n_ins
           << "+1), order";
        for (auto grp : assembly.groups) ts << " " << to_string(grp);
        ts << "\n";
    }
    if (!assembly.prompts.source_text.empty()) {
        ts << "driving text prompts:\n";
        for (size_t i = 0; i < assembly.prompts.source_text.size(); ++i) {
            int row = assembly.prompts.token_index[i];
            ts << "  [" << to_string(assembly.groups[static_cast<size_t>(row)]) << " token "
               << row << "] " << assembly.prompts.source_text[i] << "\n";
        }
    }

    for (const auto& sa : res.answers) {
        ts << "\n[" << to_string(sa.record.task) << (sa.record.is_core ? " core " : " ")
           << to_string(sa.record.qtype) << "]\n";
        ts << "Q: " << sa.asked_question << "\n";
        ts << "model: " << sa.prediction << "\n";
        ts << "gold:  " << sa.record.answer << "\n";
        if (sa.flagged) ts << "(predicted tags unparseable; chained identities dropped)\n";
    }

    std::cout << ts.str();
    if (!rc.out.empty()) {
        open_run_dir(rc, "infer");
        std::ofstream tf(fs::path(rc.out) / "transcript.txt");
        if (!tf) throw IoError("cannot write transcript in " + rc.out);
        tf << ts.str();
        std::cout << "transcript: " << (fs::path(rc.out) / "transcript.txt").string() << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

int inspect_checkpoint(const std::string& dir) {
    auto manifest = read_checkpoint_manifest(dir);
    const auto& meta = manifest["meta"];
    std::cout << "checkpoint: " << dir << "\n";
    std::cout << "format: " << manifest["format"].get<int>() << "\n";
    if (meta.contains("step")) std::cout << "step: " << meta["step"].get<int>() << "\n";
    if (meta.contains("strategy"))
        std::cout << "strategy: " << meta["strategy"].get<std::string>() << "\n";
    if (meta.contains("vocab_fingerprint"))
        std::cout << "vocab fingerprint: " << hex64(meta["vocab_fingerprint"].get<uint64_t>())
                  << "\n";
    if (meta.contains("run_config")) {
        const auto& trc = meta["run_config"];
        std::cout << "preset: " << trc.value("preset", "?")
                  << "  plora_mode: " << trc.value("plora_mode", "?")
                  << "  n_ins: " << trc.value("n_ins", 0) << "\n";
    }

    uint64_t elems = 0;
    std::set<std::string> branches;
    for (const auto& entry : manifest["params"]) {
        std::string name = entry["name"].get<std::string>();
        elems += static_cast<uint64_t>(entry["rows"].get<int>()) *
                 static_cast<uint64_t>(entry["cols"].get<int>());
        // routed adapter names look like <site>.plora.<branch>.{up,down}.{A,B}
        auto pos = name.find(".plora.");
        if (pos != std::string::npos) {
            std::string tail = name.substr(pos + 7);
            for (const char* suffix : {".up.A", ".up.B", ".down.A", ".down.B"}) {
                auto s = tail.rfind(suffix);
                if (s != std::string::npos && s + std::strlen(suffix) == tail.size()) {
                    branches.insert(tail.substr(0, s));
                    break;
                }
            }
        }
    }
    std::cout << "params: " << manifest["params"].size() << " tensors, " << elems
              << " values\n";
    if (!branches.empty()) {
        std::cout << "adapter branches:";
        for (const auto& b : branches) std::cout << " " << b;
        std::cout << "\n";
    }
    std::cout << "name rows cols offset\n";
    for (const auto& entry : manifest["params"])
        std::cout << entry["name"].get<std::string>() << " " << entry["rows"].get<int>() << " "
                  << entry["cols"].get<int>() << " " << entry["offset"].get<uint64_t>() << "\n";
    return 0;
}

int inspect_dataset(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("cannot read dataset manifest: " + dir);
    nlohmann::json manifest;
    mf >> manifest;
    std::cout << manifest.dump(2) << "\n";
    for (const char* split : {"train", "val"}) {
        std::string path = data_file(dir, split);
        auto recs = read_records(path);
        std::cout << split << ": " << recs.size() << " records in " << path << "\n";
    }
    return 0;
}

int inspect_scene(const RunConfig& rc) {
    GenConfig gc = model_config_from(rc).gen;
    auto scene = gen_scene(rc.scene_seed, gc);
    std::cout << "scene " << rc.scene_seed << " (preset " << rc.preset << ")\n";
    std::cout << "ego: pos (" << scene.ego_pose.position.x << ", " << scene.ego_pose.position.y
              << ") heading " << scene.ego_pose.heading << "  motion: "
              << derive_motion_text(scene.ego_plan, scene.ego_pose.heading) << "\n";
    std::cout << "objects (" << scene.objects.size() << "):\n";
    for (const auto& o : scene.objects) {
        double speed = std::sqrt(o.velocity.x * o.velocity.x + o.velocity.y * o.velocity.y);
        std::cout << "  #" << o.id << " " << to_string(o.class_label) << " at ("
                  << o.box3d.center.x << ", " << o.box3d.center.y << ") speed " << speed
                  << "  motion: " << derive_motion_text(o.traj, o.box3d.yaw) << "\n";
    }
    auto imp = important_objects(scene);
    std::cout << "important objects (" << imp.size() << "):";
    for (const auto& io : imp) std::cout << " " << io.tag;
    std::cout << "\n";
    std::cout << "driving tokens: " << (2 * model_config_from(rc).e2e.n_ins + 1) << " (det x "
              << model_config_from(rc).e2e.n_ins << ", mot x " << model_config_from(rc).e2e.n_ins
              << ", ego x 1)\n";
    auto recs = gen_qa(scene);
    std::cout << "qa records (" << recs.size() << "):\n";
    for (const auto& r : recs) {
        std::cout << "  [" << to_string(r.task) << (r.is_core ? " core " : " ")
                  << to_string(r.qtype) << "]\n";
        std::cout << "    Q: " << r.question << "\n";
        std::cout << "    A: " << r.answer << "\n";
    }
    return 0;
}

int run_inspect(const RunConfig& rc) {
    if (!rc.checkpoint.empty()) return inspect_checkpoint(rc.checkpoint);
    if (!rc.data.empty()) return inspect_dataset(rc.data);
    return inspect_scene(rc);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic driving scene QA: data generation, training, evaluation"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (defaults < file < flags)");

    // Flags parse into a scratch config; only flags the user actually set are
    // copied over the file-merged result, giving defaults < file < flags.
    RunConfig flag_vals;
    std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> applied;
    auto track = [&](CLI::Option* o, auto field) {
        applied.emplace_back(o, [&flag_vals, field](RunConfig& rc) { rc.*field = flag_vals.*field; });
    };
    auto add_common = [&](CLI::App* s) {
        s->fallthrough();
        track(s->add_option("--seed", flag_vals.seed, "base RNG seed"), &RunConfig::seed);
        track(s->add_option("--out", flag_vals.out, "output directory"), &RunConfig::out);
        track(s->add_option("--preset", flag_vals.preset, "model size preset (desk|tiny)"),
              &RunConfig::preset);
    };
    auto add_model = [&](CLI::App* s) {
        track(s->add_option("--plora-mode", flag_vals.plora_mode,
                            "adapter routing (task|question|hierarchical)"),
              &RunConfig::plora_mode);
        track(s->add_option("--n-ins", flag_vals.n_ins, "driving-token instance slots"),
              &RunConfig::n_ins);
        track(s->add_option("--e2e-noise", flag_vals.e2e_noise, "backbone perturbation scale"),
              &RunConfig::e2e_noise);
    };
    auto add_generation = [&](CLI::App* s) {
        track(s->add_option("--max-new", flag_vals.max_new, "generation budget per answer"),
              &RunConfig::max_new);
        applied.emplace_back(s->add_flag("--no-cot", "disable chained staged prompting"),
                             [](RunConfig& rc) { rc.use_cot = false; });
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic QA dataset");
    add_common(gen);
    track(gen->add_option("--scenes", flag_vals.scenes, "number of scenes"), &RunConfig::scenes);
    track(gen->add_option("--split", flag_vals.split, "train fraction"), &RunConfig::split);

    CLI::App* train = app.add_subcommand("train", "train on a generated dataset");
    add_common(train);
    add_model(train);
    track(train->add_option("--data", flag_vals.data, "dataset directory or .jsonl file"),
          &RunConfig::data);
    track(train->add_option("--strategy", flag_vals.strategy,
                            "training strategy (frozen-e2e|joint)"),
          &RunConfig::strategy);
    track(train->add_option("--lambda", flag_vals.lambda, "driving-loss weight"),
          &RunConfig::lambda);
    track(train->add_option("--steps", flag_vals.steps, "optimizer steps"), &RunConfig::steps);
    track(train->add_option("--batch-size", flag_vals.batch_size, "records per step"),
          &RunConfig::batch_size);
    track(train->add_option("--lr", flag_vals.lr, "peak learning rate"), &RunConfig::lr);
    track(train->add_option("--weight-decay", flag_vals.weight_decay, "decoupled weight decay"),
          &RunConfig::weight_decay);
    track(train->add_option("--warmup-ratio", flag_vals.warmup_ratio, "warmup fraction"),
          &RunConfig::warmup_ratio);
    track(train->add_option("--checkpoint-every", flag_vals.checkpoint_every,
                            "steps between checkpoints"),
          &RunConfig::checkpoint_every);

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    add_common(eval_cmd);
    add_generation(eval_cmd);
    track(eval_cmd->add_option("--checkpoint", flag_vals.checkpoint, "checkpoint directory"),
          &RunConfig::checkpoint);
    track(eval_cmd->add_option("--data", flag_vals.data, "dataset directory or .jsonl file"),
          &RunConfig::data);
    track(eval_cmd->add_option("--subset", flag_vals.subset, "evaluate only the first N scenes"),
          &RunConfig::subset);
    track(eval_cmd->add_option("--judge", flag_vals.judge, "judge source (fallback|endpoint)"),
          &RunConfig::judge);
    track(eval_cmd->add_option("--judge-url", flag_vals.judge_url, "judge endpoint URL"),
          &RunConfig::judge_url);
    track(eval_cmd->add_option("--detach", flag_vals.detach,
                               "block gradients into backbone features (true|false)"),
          &RunConfig::detach);

    CLI::App* infer = app.add_subcommand("infer", "staged transcript for one scene");
    add_common(infer);
    add_generation(infer);
    track(infer->add_option("--checkpoint", flag_vals.checkpoint, "checkpoint directory"),
          &RunConfig::checkpoint);
    track(infer->add_option("--scene-seed", flag_vals.scene_seed, "scene to generate"),
          &RunConfig::scene_seed);
    track(infer->add_option("--detach", flag_vals.detach,
                            "block gradients into backbone features (true|false)"),
          &RunConfig::detach);
    applied.emplace_back(infer->add_flag("--dump-tokens", "print the driving-token layout"),
                         [](RunConfig& rc) { rc.dump_tokens = true; });

    CLI::App* inspect = app.add_subcommand(
        "inspect", "describe a checkpoint (--checkpoint), dataset (--data), or scene");
    add_common(inspect);
    track(inspect->add_option("--checkpoint", flag_vals.checkpoint, "checkpoint directory"),
          &RunConfig::checkpoint);
    track(inspect->add_option("--data", flag_vals.data, "dataset directory"), &RunConfig::data);
    track(inspect->add_option("--scene-seed", flag_vals.scene_seed, "scene to describe"),
          &RunConfig::scene_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    RunConfig rc;
    try {
        if (!config_path.empty()) {
            std::ifstream cf(config_path);
            if (!cf) throw IoError("cannot read config file: " + config_path);
            nlohmann::json j;
            try {
                cf >> j;
            } catch (const nlohmann::json::exception& e) {
                throw ConfigError("malformed config file " + config_path + ": " + e.what());
            }
            rc.apply_json(j);
        }
        for (auto& [opt, apply] : applied)
            if (opt->count() > 0) apply(rc);
        rc.validate();
        if (app.got_subcommand(train) && rc.data.empty())
            throw ConfigError("train requires --data (flag or config file)");
        if (app.got_subcommand(eval_cmd) && rc.data.empty())
            throw ConfigError("eval requires --data (flag or config file)");
        if (app.got_subcommand(eval_cmd) && rc.checkpoint.empty())
            throw ConfigError("eval requires --checkpoint (flag or config file)");
        if (app.got_subcommand(infer) && rc.checkpoint.empty())
            throw ConfigError("infer requires --checkpoint (flag or config file)");
    } catch (const std::exception& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (app.got_subcommand(gen)) return run_gen_data(rc);
        if (app.got_subcommand(train)) return run_train(rc);
        if (app.got_subcommand(eval_cmd)) return run_eval(rc);
        if (app.got_subcommand(infer)) return run_infer(rc);
        if (app.got_subcommand(inspect)) return run_inspect(rc);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
