#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "mega/meta_trainer.hpp"
#include "mega/retrieval_eval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "mega 0.1.0";

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

// Run manifest: everything needed to reproduce the run, written atomically.
void write_run_manifest(const std::string& out_dir, const std::string& command,
                        const std::map<std::string, std::string>& config, int seed,
                        const std::vector<std::string>& artifacts, double wall_ms) {
    json j;
    j["command"] = command;
    j["config"] = config;
    j["seed"] = seed;
    j["artifacts"] = artifacts;
    j["version"] = kVersion;
    j["wall_ms"] = wall_ms;
    fs::create_directories(out_dir);
    fs::path final_path = fs::path(out_dir) / "run.json";
    fs::path tmp_path = final_path;
    tmp_path += ".tmp";
    {
        std::ofstream out(tmp_path);
        if (!out.good()) mega::fatal("cannot write manifest: " + final_path.string());
        out << j.dump(2) << "\n";
    }
    fs::rename(tmp_path, final_path);
    std::cout << "wrote " << final_path.string() << "\n";
}

// Flag values recorded by name so they can override config-file entries.
using KvMap = std::map<std::string, std::string>;

void add_value_flag(CLI::App* cmd, const std::string& names, const std::string& key, KvMap& sink,
                    const std::string& help) {
    cmd->add_option_function<std::string>(names, [&sink, key](const std::string& v) { sink[key] = v; }, help);
}

void add_bool_pair(CLI::App* cmd, const std::string& on_names, const std::string& off_names, const std::string& key,
                   KvMap& sink, const std::string& help) {
    cmd->add_flag_callback(on_names, [&sink, key] { sink[key] = "true"; }, help);
    cmd->add_flag_callback(off_names, [&sink, key] { sink[key] = "false"; }, "disable " + help);
}

mega::Dataset load_any_dataset(const std::string& dir, const std::string& naming) {
    if (fs::exists(fs::path(dir) / "manifest.csv")) return mega::load_manifest_dataset(dir);
    mega::NamingScheme scheme =
        naming == "flat_unlabeled" ? mega::NamingScheme::flat_unlabeled : mega::NamingScheme::reid_underscore;
    return mega::load_dataset_dir(dir, scheme);
}

mega::EmbedderHandle load_victim(const std::string& path) {
    if (!fs::exists(path)) mega::fatal("checkpoint not found: " + path);
    auto emb = std::make_shared<mega::ToyEmbedder>(mega::load_embedder(path));
    return mega::make_handle(emb);
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

// ------------------------------------------------------------------- toygen

struct ToygenArgs {
    int num_ids = 16;
    int imgs_per_id = 8;
    int image_size = 32;
    int seed = 0;
    std::string out_dir;
    std::string config_file;
    KvMap overrides;
};

void apply_toygen_entry(ToygenArgs& a, const std::string& key, const std::string& value) {
    if (key == "num_ids") a.num_ids = mega::detail::parse_int(value, key);
    else if (key == "imgs_per_id") a.imgs_per_id = mega::detail::parse_int(value, key);
    else if (key == "image_size") a.image_size = mega::detail::parse_int(value, key);
    else if (key == "seed") a.seed = mega::detail::parse_int(value, key);
    else mega::fatal("config: unknown key: " + key);
}

void run_toygen(ToygenArgs& a) {
    Clock::time_point start = Clock::now();
    if (!a.config_file.empty())
        for (const auto& [k, v] : mega::detail::read_kv_file(a.config_file)) apply_toygen_entry(a, k, v);
    for (const auto& [k, v] : a.overrides) apply_toygen_entry(a, k, v);

    mega::Dataset ds = mega::generate_toy_dataset(a.num_ids, a.imgs_per_id, a.image_size, a.seed);
    mega::write_dataset(ds, a.out_dir);
    std::cout << "generated " << ds.size() << " images (" << a.num_ids << " ids x " << a.imgs_per_id << ") in "
              << a.out_dir << "\n";

    std::map<std::string, std::string> cfg{{"num_ids", std::to_string(a.num_ids)},
                                           {"imgs_per_id", std::to_string(a.imgs_per_id)},
                                           {"image_size", std::to_string(a.image_size)},
                                           {"seed", std::to_string(a.seed)}};
    write_run_manifest(a.out_dir, "toygen", cfg, a.seed, {a.out_dir + "/manifest.csv"}, ms_since(start));
}

// -------------------------------------------------------------- train-victim

struct VictimArgs {
    std::string dataset;
    std::string arch = "A";
    int dim = 32;
    mega::VictimTrainConfig train;
    std::string out_dir;
    std::string config_file;
    KvMap overrides;
};

void apply_victim_entry(VictimArgs& a, const std::string& key, const std::string& value) {
    if (key == "arch") a.arch = value;
    else if (key == "dim") a.dim = mega::detail::parse_int(value, key);
    else if (key == "epochs") a.train.epochs = mega::detail::parse_int(value, key);
    else if (key == "lr") a.train.lr = mega::detail::parse_double(value, key);
    else if (key == "P") a.train.P = mega::detail::parse_int(value, key);
    else if (key == "K") a.train.K = mega::detail::parse_int(value, key);
    else if (key == "batches_per_epoch") a.train.batches_per_epoch = mega::detail::parse_int(value, key);
    else if (key == "seed") a.train.seed = mega::detail::parse_int(value, key);
    else mega::fatal("config: unknown key: " + key);
}

void run_train_victim(VictimArgs& a) {
    Clock::time_point start = Clock::now();
    if (!a.config_file.empty())
        for (const auto& [k, v] : mega::detail::read_kv_file(a.config_file)) apply_victim_entry(a, k, v);
    for (const auto& [k, v] : a.overrides) apply_victim_entry(a, k, v);

    mega::Dataset ds = load_any_dataset(a.dataset, "");
    mega::ToyEmbedder emb = mega::build_toy_embedder(a.arch, a.dim, a.train.seed);
    mega::train_toy_embedder(emb, ds, a.train);

    fs::create_directories(a.out_dir);
    std::string ckpt = (fs::path(a.out_dir) / ("victim_" + a.arch + ".ckpt")).string();
    mega::save_embedder(ckpt, emb);
    std::cout << "wrote " << ckpt << "\n";

    mega::Dataset query = mega::filter_split(ds, mega::SplitRole::query);
    mega::Dataset gallery = mega::filter_split(ds, mega::SplitRole::gallery);
    if (!query.samples.empty() && !gallery.samples.empty()) {
        mega::EmbedderHandle f = load_victim(ckpt);
        mega::EvalReport rep = mega::evaluate_attack(f, nullptr, mega::AttackBudget(), query, gallery);
        mega::print_report(rep, std::cout);
    }

    std::map<std::string, std::string> cfg{{"arch", a.arch},
                                           {"dim", std::to_string(a.dim)},
                                           {"epochs", std::to_string(a.train.epochs)},
                                           {"lr", mega::detail::fmt_double(a.train.lr)},
                                           {"P", std::to_string(a.train.P)},
                                           {"K", std::to_string(a.train.K)},
                                           {"batches_per_epoch", std::to_string(a.train.batches_per_epoch)},
                                           {"seed", std::to_string(a.train.seed)},
                                           {"dataset", a.dataset}};
    write_run_manifest(a.out_dir, "train-victim", cfg, a.train.seed, {ckpt}, ms_since(start));
}

// -------------------------------------------------------------- attack-train

struct AttackTrainArgs {
    std::string dataset;
    std::string meta_dataset;
    std::string surrogate;
    std::string out_dir;
    std::string config_file;
    bool ignore_labels = false;
    KvMap overrides;
};

void run_attack_train(AttackTrainArgs& a) {
    Clock::time_point start = Clock::now();
    mega::TrainConfig cfg;
    if (!a.config_file.empty()) cfg = mega::parse_config_file(a.config_file);
    for (const auto& [k, v] : a.overrides) mega::apply_config_entry(cfg, k, v);
    mega::validate_config(cfg);
    if (cfg.use_meta && a.meta_dataset.empty()) mega::fatal("--use-meta requires --meta-dataset");

    std::string naming = cfg.supervised() ? "" : "flat_unlabeled";
    mega::Dataset ds_T = load_any_dataset(a.dataset, naming);
    mega::Dataset ds_A;
    if (!a.meta_dataset.empty()) ds_A = load_any_dataset(a.meta_dataset, naming);
    if (a.ignore_labels) {
        ds_T = mega::strip_labels(std::move(ds_T));
        ds_A = mega::strip_labels(std::move(ds_A));
    }

    mega::EmbedderHandle f = load_victim(a.surrogate);

    mega::TrainHooks hooks;
    mega::StepTrace last;
    hooks.after_step = [&last](const mega::MetaTrainer&, const mega::StepTrace& t) { last = t; };
    hooks.after_epoch = [&last, &cfg](const mega::MetaTrainer&, int epoch) {
        std::printf("epoch %3d/%d  d=%.4f  gan=%.4f  trip=%.4f  meta=%.4f\n", epoch + 1, cfg.epochs, last.d_loss,
                    last.g_gan, last.g_trip, last.meta_loss);
        std::fflush(stdout);
    };

    mega::TrainResult res =
        mega::train(ds_T, a.meta_dataset.empty() ? nullptr : &ds_A, f, cfg, a.out_dir, hooks);
    std::cout << "wrote " << res.checkpoint_path << "\n";
    std::cout << "wrote " << res.trace_path << "\n";

    std::map<std::string, std::string> manifest_cfg;
    std::stringstream canon(mega::canonical_config(cfg));
    std::string line;
    while (std::getline(canon, line)) {
        std::size_t eq = line.find('=');
        if (eq != std::string::npos) manifest_cfg[line.substr(0, eq)] = line.substr(eq + 1);
    }
    manifest_cfg["dataset"] = a.dataset;
    manifest_cfg["meta_dataset"] = a.meta_dataset;
    manifest_cfg["surrogate"] = a.surrogate;
    manifest_cfg["ignore_labels"] = a.ignore_labels ? "true" : "false";
    write_run_manifest(a.out_dir, "attack-train", manifest_cfg, cfg.seed,
                       {res.checkpoint_path, res.trace_path}, ms_since(start));
}

// ---------------------------------------------------------------------- eval

struct EvalArgs {
    std::string dataset;
    std::string victim_dir;
    std::string targets = "A";
    std::string attack;
    std::string surrogate;
    std::string out_dir;
    int figures = 0;
    bool cam_filter = true;
    int seed = 0;
};

void run_eval(EvalArgs& a) {
    Clock::time_point start = Clock::now();
    mega::Dataset ds = load_any_dataset(a.dataset, "");
    mega::Dataset query = mega::filter_split(ds, mega::SplitRole::query);
    mega::Dataset gallery = mega::filter_split(ds, mega::SplitRole::gallery);

    mega::AttackBudget budget;
    std::unique_ptr<mega::AttackArtifacts> art;
    mega::EmbedderHandle surrogate;
    mega::EvalOptions opt;
    opt.cam_filter = a.cam_filter;
    if (!a.attack.empty()) {
        if (!fs::exists(a.attack)) mega::fatal("checkpoint not found: " + a.attack);
        art = std::make_unique<mega::AttackArtifacts>(mega::load_attack_artifacts(a.attack));
        budget = mega::AttackBudget(art->eps_255);
        opt.config_hash = art->config_hash;
        if (art->use_mask) {
            if (a.surrogate.empty()) mega::fatal("masked attack checkpoint requires --surrogate");
            surrogate = load_victim(a.surrogate);
            opt.use_mask = true;
            opt.f_surrogate = &surrogate;
        }
    }

    std::vector<std::string> targets = split_commas(a.targets);
    if (targets.empty()) mega::fatal("--targets must name at least one victim");

    fs::create_directories(a.out_dir);
    std::string reports = (fs::path(a.out_dir) / "reports.jsonl").string();
    std::vector<std::string> artifacts{reports};

    for (const std::string& t : targets) {
        std::string path = (fs::path(a.victim_dir) / ("victim_" + t + ".ckpt")).string();
        mega::EmbedderHandle f = load_victim(path);
        mega::EvalReport rep = mega::evaluate_attack(f, art ? &art->gen : nullptr, budget, query, gallery, opt);
        mega::print_report(rep, std::cout);
        mega::append_report_record(reports, rep);

        if (a.figures > 0) {
            fs::path fig_dir = fs::path(a.out_dir) / "figures";
            fs::create_directories(fig_dir);
            mega::Tensor q_images = mega::all_images(query);
            if (art) q_images = mega::attack(art->gen, q_images, budget, opt.use_mask, opt.f_surrogate);
            mega::Tensor qf = f.embed(q_images);
            mega::Tensor gf = f.embed(mega::all_images(gallery));
            mega::DistMatrix dm = mega::pairwise_distances(qf, gf);
            int n = std::min<int>(a.figures, static_cast<int>(query.samples.size()));
            int k = std::min<int>(8, static_cast<int>(gallery.samples.size()));
            for (int qi = 0; qi < n; ++qi) {
                std::vector<double> row(dm.d.row(qi), dm.d.row(qi) + gallery.samples.size());
                char name[64];
                std::snprintf(name, sizeof(name), "fig_%s_q%03d.png", t.c_str(), qi);
                std::string fig = (fig_dir / name).string();
                mega::render_retrieval_grid(query.samples[static_cast<std::size_t>(qi)], row, gallery, k, fig);
                artifacts.push_back(fig);
            }
        }
    }
    std::cout << "wrote " << reports << "\n";

    std::map<std::string, std::string> cfg{{"dataset", a.dataset},       {"victim_dir", a.victim_dir},
                                           {"targets", a.targets},       {"attack", a.attack},
                                           {"surrogate", a.surrogate},   {"figures", std::to_string(a.figures)},
                                           {"cam_filter", a.cam_filter ? "true" : "false"},
                                           {"seed", std::to_string(a.seed)}};
    write_run_manifest(a.out_dir, "eval", cfg, a.seed, artifacts, ms_since(start));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toolkit for training and evaluating transferable mis-ranking attacks on toy re-ID models"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    ToygenArgs tg;
    CLI::App* toygen = app.add_subcommand("toygen", "generate a synthetic labeled re-ID dataset");
    toygen->add_option("--out-dir", tg.out_dir, "output dataset directory")->required();
    toygen->add_option("--config", tg.config_file, "key=value config file");
    add_value_flag(toygen, "--num-ids,--num_ids", "num_ids", tg.overrides, "number of identities");
    add_value_flag(toygen, "--imgs-per-id,--imgs_per_id", "imgs_per_id", tg.overrides, "images per identity");
    add_value_flag(toygen, "--image-size,--image_size", "image_size", tg.overrides, "square image side");
    add_value_flag(toygen, "--seed", "seed", tg.overrides, "generation seed");
    toygen->callback([&tg] { run_toygen(tg); });

    VictimArgs tv;
    CLI::App* victim = app.add_subcommand("train-victim", "train a toy embedder and save its checkpoint");
    victim->add_option("--dataset", tv.dataset, "labeled dataset directory")->required();
    victim->add_option("--out-dir", tv.out_dir, "output directory")->required();
    victim->add_option("--config", tv.config_file, "key=value config file");
    add_value_flag(victim, "--arch", "arch", tv.overrides, "embedder architecture (A or B)");
    add_value_flag(victim, "--dim", "dim", tv.overrides, "embedding dimension");
    add_value_flag(victim, "--epochs", "epochs", tv.overrides, "training epochs");
    add_value_flag(victim, "--lr", "lr", tv.overrides, "learning rate");
    add_value_flag(victim, "--P", "P", tv.overrides, "identities per batch");
    add_value_flag(victim, "--K", "K", tv.overrides, "images per identity");
    add_value_flag(victim, "--batches-per-epoch,--batches_per_epoch", "batches_per_epoch", tv.overrides,
                   "batches per epoch");
    add_value_flag(victim, "--seed", "seed", tv.overrides, "training seed");
    victim->callback([&tv] { run_train_victim(tv); });

    AttackTrainArgs at;
    CLI::App* atk = app.add_subcommand("attack-train", "train the perturbation generator");
    atk->add_option("--dataset", at.dataset, "training dataset directory")->required();
    atk->add_option("--meta-dataset,--meta_dataset", at.meta_dataset, "auxiliary dataset for meta-test updates");
    atk->add_option("--surrogate", at.surrogate, "surrogate embedder checkpoint")->required();
    atk->add_option("--out-dir", at.out_dir, "output directory")->required();
    atk->add_option("--config", at.config_file, "key=value config file");
    atk->add_flag("--ignore-labels", at.ignore_labels, "drop identity labels before training");
    atk->add_flag_callback("--unsupervised", [&at] { at.overrides["mode"] = "unsupervised"; },
                           "shorthand for --mode unsupervised");
    add_value_flag(atk, "--lr", "lr", at.overrides, "learning rate");
    add_value_flag(atk, "--beta1", "beta1", at.overrides, "Adam beta1");
    add_value_flag(atk, "--beta2", "beta2", at.overrides, "Adam beta2");
    add_value_flag(atk, "--epochs", "epochs", at.overrides, "training epochs");
    add_value_flag(atk, "--m,--margin", "m", at.overrides, "triplet margin");
    add_value_flag(atk, "--lambda", "lambda", at.overrides, "mis-ranking loss weight");
    add_value_flag(atk, "--eps,--eps-255,--eps_255", "eps_255", at.overrides, "perturbation budget on 0-255 scale");
    add_value_flag(atk, "--flip-prob,--flip_prob", "flip_prob", at.overrides, "label flip probability");
    add_value_flag(atk, "--P", "P", at.overrides, "identities per batch");
    add_value_flag(atk, "--K", "K", at.overrides, "images per identity");
    add_value_flag(atk, "--mode", "mode", at.overrides, "supervised or unsupervised");
    add_value_flag(atk, "--seed", "seed", at.overrides, "training seed");
    add_value_flag(atk, "--batches-per-epoch,--batches_per_epoch", "batches_per_epoch", at.overrides,
                   "batches per epoch (0 = one pool pass)");
    add_value_flag(atk, "--gen-channels,--gen_channels", "gen_channels", at.overrides, "generator base width");
    add_value_flag(atk, "--disc-channels,--disc_channels", "disc_channels", at.overrides, "discriminator base width");
    add_bool_pair(atk, "--use-mask,--use_mask", "--no-use-mask,--no-use_mask", "use_mask", at.overrides,
                  "saliency masking of generator input");
    add_bool_pair(atk, "--use-meta,--use_meta", "--no-use-meta,--no-use_meta", "use_meta", at.overrides,
                  "meta-test updates on the auxiliary dataset");
    add_bool_pair(atk, "--meta-clamp,--meta_clamp", "--no-meta-clamp,--no-meta_clamp", "meta_clamp", at.overrides,
                  "re-projection of transplanted perturbations");
    add_bool_pair(atk, "--meta-update-per-batch,--meta_update_per_batch",
                  "--no-meta-update-per-batch,--no-meta_update_per_batch", "meta_update_per_batch", at.overrides,
                  "apply meta updates after every batch");
    add_bool_pair(atk, "--nonsaturating-gan,--nonsaturating_gan", "--no-nonsaturating-gan,--no-nonsaturating_gan",
                  "nonsaturating_gan", at.overrides, "non-saturating generator GAN loss");
    add_bool_pair(atk, "--keep-epoch-checkpoints,--keep_epoch_checkpoints",
                  "--no-keep-epoch-checkpoints,--no-keep_epoch_checkpoints", "keep_epoch_checkpoints", at.overrides,
                  "per-epoch checkpoint files");
    atk->callback([&at] { run_attack_train(at); });

    EvalArgs ev;
    CLI::App* eval_cmd = app.add_subcommand("eval", "rank victims before/after the attack");
    eval_cmd->add_option("--dataset", ev.dataset, "dataset directory with query/gallery splits")->required();
    eval_cmd->add_option("--victim-dir,--victim_dir", ev.victim_dir, "directory holding victim_<arch>.ckpt files")
        ->required();
    eval_cmd->add_option("--targets", ev.targets, "comma-separated victim architectures");
    eval_cmd->add_option("--attack", ev.attack, "attack checkpoint (omit for clean-only evaluation)");
    eval_cmd->add_option("--surrogate", ev.surrogate, "surrogate checkpoint (needed for masked attacks)");
    eval_cmd->add_option("--out-dir", ev.out_dir, "output directory")->required();
    eval_cmd->add_option("--figures", ev.figures, "render retrieval grids for the first N queries");
    eval_cmd->add_flag("--cam-filter,!--no-cam-filter", ev.cam_filter, "same-id same-camera gallery filtering");
    eval_cmd->add_option("--seed", ev.seed, "evaluation seed (recorded in the manifest)");
    eval_cmd->callback([&ev] { run_eval(ev); });

    try {
        app.parse(argc, argv);
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const mega::FatalError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
