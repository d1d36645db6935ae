#include "fuseloc/cli.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "fuseloc/metric.hpp"

namespace fuseloc {

namespace fs = std::filesystem;

std::vector<Tensor<float>> embed_split(const ThreeBranchNetwork<float>& net,
                                       ParameterTable<float>& params, const DatasetManifest& manifest,
                                       bool db_split) {
    std::vector<Tensor<float>> out;
    for (int id : manifest.split_ids(db_split)) {
        Sample s = preprocess(load_sample(manifest, id), preprocess_seed_for(id));
        out.push_back(net.forward(s.image, s.cloud, params, Mode::kInfer, nullptr));
    }
    return out;
}

TrainingData prepare_training_data(const DatasetManifest& manifest, const TrainConfig& cfg) {
    TrainingData data;
    std::vector<PoseEntry> poses;
    for (int id : manifest.ids) {
        Sample s = preprocess(load_sample(manifest, id), preprocess_seed_for(id));
        data.samples.push_back(TrainSample{std::move(s.image), std::move(s.cloud)});
        data.sample_ids.push_back(id);
        poses.push_back(PoseEntry{static_cast<int>(data.samples.size()) - 1, manifest.poses.at(id)});
    }
    // PoseEntry.id is the index into `samples`, so mined tuples are already
    // index-aligned for the trainer.
    data.tuples = mine_triplets(poses, cfg.d_pos, cfg.d_neg, cfg.seed, cfg.tuples);
    return data;
}

void write_loss_csv(const std::vector<double>& history, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cli", "cannot open '" + path + "' for writing");
    os << "step,loss\n";
    for (std::size_t i = 0; i < history.size(); ++i) {
        char buf[32];
        auto res = std::to_chars(buf, buf + sizeof(buf), history[i]);
        os << i << "," << std::string(buf, res.ptr) << "\n";
    }
    if (!os) throw IoError("cli", "write failed for '" + path + "'");
}

namespace {

int cmd_synth(const std::string& out_dir, int scenes, const std::string& mode, std::uint64_t seed) {
    const RevisitMode m = mode == "reverse" ? RevisitMode::kReverse : RevisitMode::kSame;
    DatasetManifest manifest = synth_generate(out_dir, scenes, m, seed);
    std::cout << "synth: wrote " << manifest.ids.size() << " samples (" << scenes << " scenes, " << mode
              << " revisits) to " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& data_dir, const std::string& config_path, const std::string& out_path,
              std::uint64_t seed, bool seed_given) {
    AppConfig cfg = config_path.empty() ? AppConfig{} : parse_config_file(config_path);
    if (seed_given) cfg.train.seed = seed;
    cfg.validate();
    DatasetManifest manifest = load_manifest(data_dir);
    TrainingData data = prepare_training_data(manifest, cfg.train);
    ThreeBranchNetwork<float> net{cfg.net};
    ParameterTable<float> params;
    net.init_params(params, cfg.train.seed);
    TrainResult result = train(net, params, data.samples, data.tuples, cfg.train);
    save_parameters(params, out_path);
    write_loss_csv(result.loss_history, out_path + ".loss.csv");
    double final_loss = result.loss_history.empty() ? 0.0 : result.loss_history.back();
    std::cout << "train: " << result.loss_history.size() << " steps, final batch loss " << final_loss
              << ", model " << out_path << "\n";
    return 0;
}

int cmd_embed(const std::string& model_path, const std::string& data_dir, const std::string& split,
              const std::string& out_path, const std::string& config_path) {
    AppConfig cfg = config_path.empty() ? AppConfig{} : parse_config_file(config_path);
    cfg.net.validate();
    ThreeBranchNetwork<float> net{cfg.net};
    ParameterTable<float> params;
    net.init_params(params, 0);
    load_parameters_into(params, model_path);
    DatasetManifest manifest = load_manifest(data_dir);
    std::vector<Tensor<float>> descriptors = embed_split(net, params, manifest, split == "db");
    save_descriptors(descriptors, out_path);
    std::cout << "embed: wrote " << descriptors.size() << " descriptors (" << split << ") to " << out_path
              << "\n";
    return 0;
}

int cmd_eval(const std::string& db_path, const std::string& query_path, const std::string& poses_path,
             const std::string& manifest_path, double d_pos, const std::string& out_prefix,
             const std::string& branches) {
    const BranchMask mask = BranchMask::parse(branches);
    std::vector<PoseRecord> all = parse_poses(poses_path);
    std::map<int, PoseRecord> by_id;
    for (const auto& r : all) by_id[r.id] = r;
    // the split comes from the manifest file sitting beside poses.txt unless
    // overridden; FLD files carry no ids of their own
    std::string mpath = manifest_path;
    if (mpath.empty()) mpath = (fs::path(poses_path).parent_path() / "manifest.txt").string();
    DatasetManifest manifest = load_manifest(fs::path(mpath).parent_path().string());
    auto split_records = [&](bool db) {
        std::vector<PoseRecord> out;
        for (int id : manifest.split_ids(db)) {
            auto it = by_id.find(id);
            if (it == by_id.end())
                throw FormatError("evalkit", "manifest id " + std::to_string(id) + " missing from poses");
            out.push_back(it->second);
        }
        return out;
    };
    DescriptorDB db = build_db(db_path, split_records(true));
    DescriptorDB queries = build_db(query_path, split_records(false));
    PRResult pr = pr_curve(db, queries, d_pos, {}, mask);
    export_results(pr, out_prefix);
    std::cout << "eval: branches=" << mask.describe() << " max_f1=" << pr.max_f1
              << " recall_at_p100=" << pr.recall_at_p100 << " (" << out_prefix << ".csv/.json)\n";
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"camera-LiDAR three-branch place descriptor"};
    app.set_version_flag("--version", std::string("fuseloc ") + kVersion);
    app.require_subcommand(0, 1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string synth_out, synth_mode = "same";
    int synth_scenes = 8;
    std::uint64_t synth_seed = 0;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--scenes", synth_scenes, "number of distinct scenes")->required();
    synth->add_option("--mode", synth_mode, "revisit mode")->check(CLI::IsMember({"same", "reverse"}));
    synth->add_option("--seed", synth_seed, "generator seed");

    auto* train_cmd = app.add_subcommand("train", "train the descriptor network");
    std::string train_data, train_config, train_out = "model.flm";
    std::uint64_t train_seed = 0;
    train_cmd->add_option("--data", train_data, "dataset directory")->required();
    auto* train_config_opt = train_cmd->add_option("--config", train_config, "key=value config file");
    train_cmd->add_option("--out", train_out, "output model file");
    auto* train_seed_opt = train_cmd->add_option("--seed", train_seed, "training seed (overrides config)");

    auto* embed = app.add_subcommand("embed", "embed one dataset split into descriptors");
    std::string embed_model, embed_data, embed_split_name, embed_out, embed_config;
    embed->add_option("--model", embed_model, "model file")->required();
    embed->add_option("--data", embed_data, "dataset directory")->required();
    embed->add_option("--split", embed_split_name, "which split")->required()
        ->check(CLI::IsMember({"db", "query"}));
    embed->add_option("--out", embed_out, "output descriptor file")->required();
    embed->add_option("--config", embed_config, "config file (must match the trained model)");

    auto* eval = app.add_subcommand("eval", "evaluate retrieval of query descriptors against a database");
    std::string eval_db, eval_query, eval_poses, eval_manifest, eval_out = "results", eval_branches = "img,pc,fusion";
    double eval_dpos = 5.0;
    eval->add_option("--db", eval_db, "database descriptor file")->required();
    eval->add_option("--query", eval_query, "query descriptor file")->required();
    eval->add_option("--poses", eval_poses, "poses.txt covering both splits")->required();
    eval->add_option("--manifest", eval_manifest, "manifest.txt (default: next to poses.txt)");
    eval->add_option("--dpos", eval_dpos, "true-match radius in meters");
    eval->add_option("--out", eval_out, "output prefix for CSV/JSON");
    eval->add_option("--branches", eval_branches, "descriptor segments used for distances");

    try {
        app.parse(argc, argv);
        if (*synth) return cmd_synth(synth_out, synth_scenes, synth_mode, synth_seed);
        if (*train_cmd)
            return cmd_train(train_data, train_config_opt->count() ? train_config : "", train_out,
                             train_seed, train_seed_opt->count() > 0);
        if (*embed) return cmd_embed(embed_model, embed_data, embed_split_name, embed_out, embed_config);
        if (*eval)
            return cmd_eval(eval_db, eval_query, eval_poses, eval_manifest, eval_dpos, eval_out,
                            eval_branches);
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        std::cout << "fuseloc " << kVersion << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "cli: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
}

}  // namespace fuseloc
