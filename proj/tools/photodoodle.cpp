#include <fstream>
#include <iostream>
#include <numeric>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "photodoodle/pipeline.hpp"

using namespace photodoodle;

namespace {

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw data_error("cannot open config: " + path);
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded()) throw data_error(path + ": malformed JSON");
    return j;
}

void check_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw config_error("unknown " + where + " key: " + it.key());
}

SamplerConfig sampler_from_json(const nlohmann::json& j) {
    check_keys(j, {"steps", "seed", "record_trajectory", "pos_row_offset"}, "sampler config");
    SamplerConfig s;
    s.steps = j.value("steps", s.steps);
    s.seed = j.value("seed", s.seed);
    s.record_trajectory = j.value("record_trajectory", s.record_trajectory);
    s.pos_row_offset = j.value("pos_row_offset", s.pos_row_offset);
    return s;
}

void write_loss_log(const std::string& path, const std::vector<double>& log) {
    std::ofstream os(path);
    if (!os) throw data_error("cannot write loss log: " + path);
    for (size_t i = 0; i < log.size(); ++i) os << i << " " << log[i] << "\n";
}

LoraAdapter<float> load_adapter_for(const std::string& adapter_path,
                                    const std::string& base_path) {
    auto adapter = load_adapter(adapter_path);
    uint64_t fp = fingerprint_file(base_path);
    if (adapter.base_fingerprint != 0 && adapter.base_fingerprint != fp)
        throw config_error("adapter " + adapter_path +
                           " was trained against a different base checkpoint");
    return adapter;
}

int run(int argc, char** argv) {
    CLI::App app{"paired image editing: data generation, two-stage training, sampling"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a paired-edit corpus");
    std::string kind = "general", out_dir;
    int style = 0, count = 100, size = 16;
    uint64_t seed = 0;
    gen->add_option("--kind", kind, "general|style")->check(CLI::IsMember({"general", "style"}));
    gen->add_option("--style", style, "style id 1..6 (style corpora)");
    gen->add_option("--count", count, "number of pairs");
    gen->add_option("--seed", seed, "corpus seed");
    gen->add_option("--size", size, "image height/width");
    gen->add_option("--out", out_dir, "output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "train the omni or edit stage");
    std::string stage, config_path, data_dir, base_path, out_path, log_path;
    train->add_option("--stage", stage, "omni|edit")
        ->check(CLI::IsMember({"omni", "edit"}))
        ->required();
    train->add_option("--config", config_path, "JSON config ({model:{}, train:{}})");
    train->add_option("--data", data_dir, "corpus directory")->required();
    train->add_option("--base", base_path, "base checkpoint (required for edit)");
    train->add_option("--out", out_path, "output checkpoint/adapter path")->required();
    train->add_option("--log", log_path, "loss log path (default <out>.loss)");

    // merge
    auto* mergec = app.add_subcommand("merge", "merge an adapter into a base checkpoint");
    std::string m_base, m_adapter, m_out;
    mergec->add_option("--base", m_base)->required();
    mergec->add_option("--adapter", m_adapter)->required();
    mergec->add_option("--out", m_out)->required();

    // edit
    auto* editc = app.add_subcommand("edit", "edit one image");
    std::string e_base, e_adapter, e_src, e_instruction, e_out, e_traj;
    int e_steps = 20;
    uint64_t e_seed = 0;
    editc->add_option("--base", e_base)->required();
    editc->add_option("--adapter", e_adapter);
    editc->add_option("--src", e_src)->required();
    editc->add_option("--instruction", e_instruction)->required();
    editc->add_option("--steps", e_steps);
    editc->add_option("--seed", e_seed);
    editc->add_option("--out", e_out)->required();
    editc->add_option("--trajectory", e_traj, "dump per-step decodes into this directory");

    // eval
    auto* evalc = app.add_subcommand("eval", "evaluate a model against a corpus");
    std::string v_base, v_adapter, v_data, v_report;
    int v_steps = 20;
    uint64_t v_seed = 0;
    evalc->add_option("--base", v_base)->required();
    evalc->add_option("--adapter", v_adapter);
    evalc->add_option("--data", v_data)->required();
    evalc->add_option("--report", v_report)->required();
    evalc->add_option("--steps", v_steps);
    evalc->add_option("--seed", v_seed);

    // ablate
    auto* ablatec = app.add_subcommand("ablate", "run a controlled ablation");
    std::string a_mode, a_config, a_report_dir;
    ablatec->add_option("--mode", a_mode, "no-pe-clone|no-pretrain|no-editlora")->required();
    ablatec->add_option("--config", a_config, "pipeline config JSON")->required();
    ablatec->add_option("--report-dir", a_report_dir)->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        gen_corpus(kind, count, seed, out_dir, style, size, size);
        std::cout << "wrote " << count << " pairs to " << out_dir << "\n";
        return 0;
    }

    if (train->parsed()) {
        nlohmann::json cfg_json = nlohmann::json::object();
        if (!config_path.empty()) cfg_json = read_json_file(config_path);
        check_keys(cfg_json, {"model", "train"}, "config");
        ModelConfig mcfg = model_config_from_json(cfg_json.value("model", nlohmann::json::object()));
        TrainConfig tc =
            train_config_from_json(cfg_json.value("train", nlohmann::json::object()), stage);
        if (tc.stage != stage) throw config_error("--stage disagrees with the config file");
        auto corpus = load_corpus(data_dir);

        Checkpoint base;
        uint64_t base_fp = 0;
        if (!base_path.empty()) {
            base = load_checkpoint(base_path);
            base_fp = fingerprint_file(base_path);
        } else {
            if (stage == "edit") throw config_error("edit stage requires --base");
            base = make_fresh_checkpoint(mcfg, dataset_vocab(), tc.seed);
        }
        auto res = train_stage(tc, base, corpus, base_fp);
        if (stage == "omni")
            save_checkpoint(out_path, res.checkpoint);
        else
            save_adapter(out_path, res.adapter);
        write_loss_log(log_path.empty() ? out_path + ".loss" : log_path, res.loss_log);
        double final_loss = res.loss_log.empty() ? 0.0 : res.loss_log.back();
        std::cout << "trained " << tc.steps << " steps, final loss " << final_loss << ", wrote "
                  << out_path << "\n";
        return 0;
    }

    if (mergec->parsed()) {
        auto base = load_checkpoint(m_base);
        auto adapter = load_adapter_for(m_adapter, m_base);
        base.params = merge(base.params, adapter);
        if (adapter.stage == "omni") base.config.stage_tag = "omni-merged";
        save_checkpoint(m_out, base);
        std::cout << "merged " << m_adapter << " into " << m_out << "\n";
        return 0;
    }

    if (editc->parsed()) {
        auto base = load_checkpoint(e_base);
        LoraAdapter<float> adapter;
        bool has_adapter = !e_adapter.empty();
        if (has_adapter) adapter = load_adapter_for(e_adapter, e_base);
        Image src = read_ppm(e_src);
        SamplerConfig scfg;
        scfg.steps = e_steps;
        scfg.seed = e_seed;
        if (!e_traj.empty()) {
            scfg.record_trajectory = true;
            PatchCodec<float> codec(base.config.patch, base.config.channels,
                                    base.config.codec_seed, base.config.d);
            TokenSeq<float> c_img = codec.encode_image(src);
            Vocab vocab(base.vocab, base.config.max_text_len);
            auto c_text = encode_instruction_ids(vocab, e_instruction, base.config.d);
            std::vector<Tensor<float>> traj;
            euler_sample<float>(base.config, base.params,
                                has_adapter ? &adapter.entries : nullptr, c_img, c_text, scfg,
                                &traj);
            dump_trajectory(codec, c_img.positions, traj, e_traj);
        }
        Image out = edit_image(base, has_adapter ? &adapter : nullptr, src, e_instruction, scfg);
        write_ppm(e_out, out);
        std::cout << "wrote " << e_out << "\n";
        return 0;
    }

    if (evalc->parsed()) {
        auto base = load_checkpoint(v_base);
        LoraAdapter<float> adapter;
        bool has_adapter = !v_adapter.empty();
        if (has_adapter) adapter = load_adapter_for(v_adapter, v_base);
        auto pairs = load_corpus(v_data);
        SamplerConfig scfg;
        scfg.steps = v_steps;
        scfg.seed = v_seed;
        auto report = evaluate(base, has_adapter ? &adapter : nullptr, pairs, scfg);
        report["base_fingerprint"] = fingerprint_file(v_base);
        std::ofstream os(v_report);
        if (!os) throw data_error("cannot write report: " + v_report);
        os << report.dump(2) << "\n";
        std::cout << "bg_mse " << report["aggregate"]["bg_mse"].get<double>() << ", edit_mse "
                  << report["aggregate"]["edit_mse"].get<double>() << ", wrote " << v_report
                  << "\n";
        return 0;
    }

    // ablate
    auto j = read_json_file(a_config);
    check_keys(j, {"model", "omni", "edit", "sampler", "data_general", "data_style", "data_eval"},
               "ablate config");
    ModelConfig mcfg = model_config_from_json(j.value("model", nlohmann::json::object()));
    TrainConfig omni_tc = train_config_from_json(j.value("omni", nlohmann::json::object()), "omni");
    TrainConfig edit_tc = train_config_from_json(j.value("edit", nlohmann::json::object()), "edit");
    SamplerConfig scfg = sampler_from_json(j.value("sampler", nlohmann::json::object()));
    auto general = load_corpus(j.at("data_general").get<std::string>());
    auto style_pairs = load_corpus(j.at("data_style").get<std::string>());
    auto eval_pairs = load_corpus(j.at("data_eval").get<std::string>());

    auto report = ablate(a_mode, mcfg, omni_tc, edit_tc, general, style_pairs, eval_pairs, scfg);
    std::filesystem::create_directories(a_report_dir);
    std::ofstream os(a_report_dir + "/ablation.json");
    if (!os) throw data_error("cannot write report in " + a_report_dir);
    os << report.dump(2) << "\n";
    std::cout << "mode " << a_mode << ": delta bg_mse "
              << report["delta"]["bg_mse"].get<double>() << ", delta edit_mse "
              << report["delta"]["edit_mse"].get<double>() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const shape_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
