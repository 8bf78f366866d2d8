// chainpred: synthetic articulated-pose chained-prediction pipeline.
//
// Subcommands: gen-data | train | eval | infer | grad-check. All runs are
// deterministic functions of (config, seed); see README for the file formats.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "chainpred/checkpoint.hpp"
#include "chainpred/config.hpp"
#include "chainpred/gradsuite.hpp"
#include "chainpred/pipeline.hpp"

namespace {

using namespace chainpred;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string data_path;
  std::string checkpoint_path;
  std::string out_dir;
  std::string decode = "beam";
  int beam = 0;  // 0 = take from config
  long long seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "Run-config file (key = value)");
  cmd->add_option("--set", a.overrides, "Override, key=value (repeatable)");
  cmd->add_option("--seed", a.seed, "Override training.seed");
}

RunConfig load_config(const CommonArgs& a) {
  auto overrides = a.overrides;
  if (a.seed >= 0)
    overrides.push_back("training.seed=" + std::to_string(a.seed));
  return parse_config(a.config_path, overrides);
}

int worker_cap() {
  const char* env = std::getenv("CHAINPRED_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  return n >= 1 ? n : 1;
}

// Video datasets are stored as flattened frame sequences; sequence length
// comes from data.frames in the config.
std::vector<std::vector<Scene>> chunk_video(std::vector<Scene> flat,
                                            int frames) {
  if (frames <= 0 || flat.size() % static_cast<std::size_t>(frames) != 0)
    throw DatasetError("dataset size is not a multiple of data.frames");
  std::vector<std::vector<Scene>> out;
  for (std::size_t i = 0; i < flat.size();
       i += static_cast<std::size_t>(frames))
    out.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(i),
                     flat.begin() + static_cast<std::ptrdiff_t>(i) + frames);
  return out;
}

int cmd_gen_data(const CommonArgs& a) {
  auto cfg = load_config(a);
  std::filesystem::create_directories(a.out_dir);
  (void)worker_cap();  // generation is deterministic either way
  if (cfg.task == "video") {
    for (bool test : {false, true}) {
      std::vector<Scene> flat;
      for (auto& seq : make_video_split(cfg, test))
        for (auto& sc : seq) flat.push_back(sc);
      write_dataset(flat, a.out_dir + (test ? "/test.cpsd" : "/train.cpsd"));
    }
  } else {
    write_dataset(make_scene_split(cfg, false), a.out_dir + "/train.cpsd");
    write_dataset(make_scene_split(cfg, true), a.out_dir + "/test.cpsd");
  }
  write_effective_config(cfg, a.out_dir + "/config.txt");
  return 0;
}

int cmd_train(const CommonArgs& a) {
  auto cfg = load_config(a);
  auto scenes = read_dataset(a.data_path);
  if (cfg.task == "video") {
    auto model = build_video_model(cfg);
    train_video(model, cfg, chunk_video(std::move(scenes), cfg.data.frames),
                a.out_dir);
  } else {
    auto model = build_single_model(cfg);
    train_single(model, cfg, scenes, a.out_dir);
  }
  return 0;
}

int cmd_eval(const CommonArgs& a) {
  auto cfg = load_config(a);
  if (a.beam > 0) cfg.eval.beam = a.beam;
  auto scenes = read_dataset(a.data_path);
  std::filesystem::create_directories(a.out_dir);

  EvalOutput out;
  if (cfg.task == "video") {
    if (a.decode != "beam" && a.decode != "viterbi")
      throw ConfigError("video task supports --decode beam|viterbi");
    auto model = build_video_model(cfg);
    auto reg = model.params();
    load_checkpoint(reg, nullptr, a.checkpoint_path, config_hash(cfg));
    out = eval_video(model, cfg, chunk_video(std::move(scenes),
                                             cfg.data.frames),
                     a.decode == "viterbi");
  } else {
    if (a.decode == "viterbi")
      throw ConfigError(
          "viterbi smoothing needs the video task (temporal frames)");
    auto model = build_single_model(cfg);
    auto reg = model.params();
    load_checkpoint(reg, nullptr, a.checkpoint_path, config_hash(cfg));
    out = eval_single(model, cfg, scenes, a.decode);
  }

  std::vector<std::string> names;
  for (int j = 0; j < cfg.data.scene.joints; ++j)
    names.push_back(cfg.data.scene.joints == kJointCount
                        ? std::string(joint_name(j))
                        : "joint" + std::to_string(j));
  write_report(out.result, names, a.out_dir + "/report.csv",
               a.out_dir + "/summary.txt");
  std::printf("mean_pck %.6f\n", out.result.mean_pck);
  return 0;
}

int cmd_infer(const CommonArgs& a) {
  auto cfg = load_config(a);
  if (cfg.task == "video")
    throw ConfigError("infer renders single images; use the eval subcommand "
                      "for video");
  auto scenes = read_dataset(a.data_path);
  std::filesystem::create_directories(a.out_dir);
  auto model = build_single_model(cfg);
  auto reg = model.params();
  load_checkpoint(reg, nullptr, a.checkpoint_path, config_hash(cfg));

  auto order = chain_joint_order(cfg.data.scene.joints);
  std::ofstream poses_out(a.out_dir + "/poses.csv", std::ios::trunc);
  poses_out << "scene,joint,x,y\n";
  std::size_t count = std::min<std::size_t>(scenes.size(), 8);
  for (std::size_t i = 0; i < count; ++i) {
    auto dec = a.decode == "soft" ? soft_decode(model, as_batch(scenes[i].image)).result
                                  : beam_search(model, as_batch(scenes[i].image),
                                                cfg.eval.beam);
    auto pose = from_chain_order(dec.pose, order);
    Graph g;
    auto h = model.encode_image(g, as_batch(scenes[i].image), Mode::kEval);
    for (int j = 0; j < cfg.data.scene.joints; ++j) {
      poses_out << i << ',' << j << ',' << pose[static_cast<std::size_t>(j)].x
                << ',' << pose[static_cast<std::size_t>(j)].y << '\n';
    }
    // per-step heatmaps for the first scene only (keeps output small)
    if (i == 0) {
      auto soft = soft_decode(model, as_batch(scenes[i].image));
      for (std::size_t t = 0; t < soft.distributions.size(); ++t) {
        int stride = cfg.net.heatmap_stride();
        Pose overlay = {
            {dec.pose[t].x / stride, dec.pose[t].y / stride, true}};
        emit_heatmap_image(soft.distributions[t], &overlay, 8,
                           a.out_dir + "/heatmap_step" + std::to_string(t) +
                               ".ppm");
      }
    }
  }
  if (!poses_out) throw ValidationError("failed writing poses.csv");
  return 0;
}

int cmd_grad_check() {
  auto report = run_grad_suite();
  for (auto& e : report.entries)
    std::printf("%-32s %.3e\n", e.name.c_str(), e.max_rel_error);
  std::printf("worst %.3e tolerance %.1e : %s\n", report.worst(),
              report.tolerance, report.passed() ? "PASS" : "FAIL");
  return report.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chained-prediction pose pipeline"};
  app.require_subcommand(1);

  CommonArgs gen, train, eval_args, infer;

  auto* gen_cmd = app.add_subcommand("gen-data", "Generate datasets");
  add_common(gen_cmd, gen);
  gen_cmd->add_option("--out", gen.out_dir, "Output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_common(train_cmd, train);
  train_cmd->add_option("--data", train.data_path, "Training dataset")
      ->required();
  train_cmd->add_option("--out", train.out_dir, "Run directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval_cmd, eval_args);
  eval_cmd->add_option("--data", eval_args.data_path, "Test dataset")
      ->required();
  eval_cmd
      ->add_option("--checkpoint", eval_args.checkpoint_path, "Checkpoint")
      ->required();
  eval_cmd->add_option("--out", eval_args.out_dir, "Report directory")
      ->required();
  eval_cmd
      ->add_option("--decode", eval_args.decode,
                   "beam|soft|oracle|flip|viterbi")
      ->check(CLI::IsMember({"beam", "soft", "oracle", "flip", "viterbi"}));
  eval_cmd->add_option("--beam", eval_args.beam, "Beam width override");

  auto* infer_cmd = app.add_subcommand("infer", "Decode and render heatmaps");
  add_common(infer_cmd, infer);
  infer_cmd->add_option("--data", infer.data_path, "Dataset")->required();
  infer_cmd->add_option("--checkpoint", infer.checkpoint_path, "Checkpoint")
      ->required();
  infer_cmd->add_option("--out", infer.out_dir, "Output directory")
      ->required();
  infer_cmd->add_option("--decode", infer.decode, "beam|soft")
      ->check(CLI::IsMember({"beam", "soft"}));

  auto* grad_cmd = app.add_subcommand("grad-check", "Run the gradient suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen);
    if (train_cmd->parsed()) return cmd_train(train);
    if (eval_cmd->parsed()) return cmd_eval(eval_args);
    if (infer_cmd->parsed()) return cmd_infer(infer);
    if (grad_cmd->parsed()) return cmd_grad_check();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
