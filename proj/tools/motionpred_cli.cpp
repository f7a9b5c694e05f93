#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "motionpred/dataset.hpp"
#include "motionpred/error.hpp"
#include "motionpred/evaluate.hpp"
#include "motionpred/grad_suite.hpp"
#include "motionpred/pipeline.hpp"

using namespace motionpred;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string config;
};

bool given(const std::vector<std::string>& args, const std::string& flag) {
  for (const auto& a : args)
    if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
  return false;
}

std::string config_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

// Expands `--config file` into the flags it names. Keys are long option
// names; underscores stand for dashes.
std::vector<std::string> inject_config(const CLI::App& app, std::vector<std::string> args) {
  const auto sub_it = std::find_if(args.begin(), args.end(), [](const std::string& a) { return a.rfind("-", 0) != 0; });
  if (sub_it == args.end()) return args;
  const CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(*sub_it);
  } catch (const CLI::OptionNotFound&) {
    return args;
  }
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw CLI::FileError::Missing(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw CLI::ConversionError(path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw CLI::ConversionError(path + " must hold a JSON object");
  std::vector<std::string> extra;
  for (const auto& [key, value] : j.items()) {
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    const std::string flag = "--" + name;
    const CLI::Option* opt = sub->get_option_no_throw(flag);
    if (opt == nullptr || name == "config") {
      throw CLI::ConversionError("unknown config key '" + key + "' for " + sub->get_name());
    }
    if (given(args, flag)) continue;
    if (opt->get_expected_max() == 0) {
      if (!value.is_boolean()) throw CLI::ConversionError("config key '" + key + "' must be true or false");
      if (value.get<bool>()) extra.push_back(flag);
    } else if (value.is_array()) {
      for (const auto& v : value) {
        extra.push_back(flag);
        extra.push_back(config_text(v));
      }
    } else {
      extra.push_back(flag);
      extra.push_back(config_text(value));
    }
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

CLI::App* subcommand(CLI::App& app, const std::string& name, const std::string& help, Common& c) {
  CLI::App* sub = app.add_subcommand(name, help);
  sub->add_option("--config", c.config, "JSON object of option values; command-line flags win");
  sub->add_option("--seed", c.seed, "random seed")->capture_default_str();
  return sub;
}

void log(const std::string& s) { std::cerr << s << std::endl; }

ActionSet parse_actions(const std::string& s) {
  if (s == "gait") return gait_actions();
  if (s == "target") return target_actions();
  if (s == "all") {
    ActionSet a = gait_actions();
    for (auto x : target_actions().actions) a.actions.push_back(x);
    return a;
  }
  std::vector<std::string> names;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) names.push_back(item);
  return ActionSet::from_names(names);
}

std::vector<MotionSequence> with_labels(const std::vector<MotionSequence>& seqs, const ActionSet& set) {
  std::vector<MotionSequence> out;
  for (const auto& s : seqs)
    if (std::find(set.actions.begin(), set.actions.end(), s.label) != set.actions.end()) out.push_back(s);
  return out;
}

DatasetSplit restricted(const DatasetSplit& d, const ActionSet& set) {
  DatasetSplit out;
  out.train = with_labels(d.train, set);
  out.test = with_labels(d.test, set);
  out.norm = d.norm;
  if (out.train.empty()) throw ValidationError("dataset has no training sequences for the selected actions");
  return out;
}

void emit(const json& j, const std::string& out = "") {
  std::cout << j.dump(2) << std::endl;
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw Error("cannot write " + out);
    f << j.dump(2) << '\n';
  }
}

std::string extension(ExportFormat f) { return f == ExportFormat::csv ? ".csv" : ".jsonl"; }

json tags_json(const std::vector<Segment>& tags) {
  json runs = json::array();
  for (const auto& r : segment_runs(tags)) runs.push_back({{"segment", segment_name(r.tag)}, {"start", r.start}, {"count", r.count}});
  return runs;
}

struct ModelPaths {
  std::string mdm;
  std::vector<std::string> vae;
  std::vector<std::string> sampler;
  bool no_sampler = false;

  void add_to(CLI::App* sub, bool need_mdm) {
    auto* m = sub->add_option("--mdm", mdm, "diffusion checkpoint");
    if (need_mdm) m->required();
    sub->add_option("--vae", vae, "in-betweening checkpoint, one per T_b")->required();
    sub->add_option("--sampler", sampler, "sampler checkpoint paired with each --vae");
    sub->add_flag("--no-sampler", no_sampler, "draw latents from the learnable prior");
  }

  Models load() const {
    RunConfig rc;
    rc.mdm = mdm;
    for (const auto& v : vae) rc.vae.emplace_back(v);
    for (const auto& s : sampler) rc.sampler.emplace_back(s);
    return load_models(rc);
  }
};

struct HistoryArgs {
  std::string path;
  std::size_t index = 0;
  std::size_t frames = 0;

  void add_to(CLI::App* sub) {
    sub->add_option("--history", path, "dataset holding the history sequence")->required();
    sub->add_option("--index", index, "test-split index of the history sequence")->capture_default_str();
    sub->add_option("--history-frames", frames, "leading frames used as history (0 = all)")->capture_default_str();
  }

  MotionSequence load() const {
    const auto data = load_dataset(path);
    const auto& pool = data.test.empty() ? data.train : data.test;
    if (index >= pool.size()) {
      throw ValidationError("history index " + std::to_string(index) + " out of range (" +
                            std::to_string(pool.size()) + " sequences)");
    }
    auto seq = pool[index];
    if (frames > 0 && frames < seq.frames.size()) seq.frames.resize(frames);
    return seq;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Action-driven motion prediction: data, training, sampling and evaluation", "motionpred"};
  app.require_subcommand(1);
  Common common;
  std::function<int()> run;

  // gen-data
  GenDataOptions gen;
  std::string gen_out, gen_actions = "gait";
  auto* gd = subcommand(app, "gen-data", "generate a synthetic dataset", common);
  gd->add_option("--out", gen_out, "output .jsonl path")->required();
  gd->add_option("--actions", gen_actions, "gait, target, all or a comma list")->capture_default_str();
  gd->add_option("--per-action", gen.per_action)->capture_default_str();
  gd->add_option("--frames", gen.frames)->capture_default_str();
  gd->add_option("--turn-range", gen.turn_range)->capture_default_str();
  gd->add_option("--test-fraction", gen.test_fraction)->capture_default_str();
  gd->callback([&] {
    run = [&] {
      gen.actions = parse_actions(gen_actions).actions;
      gen.seed = common.seed;
      const auto split = generate_dataset(gen);
      save_dataset(split, gen_out);
      emit({{"out", gen_out}, {"train", split.train.size()}, {"test", split.test.size()}});
      return 0;
    };
  });

  // train-vae
  VaeConfig vcfg;
  TrainVaeOptions vopt;
  std::string v_data, v_out, v_mode = "owm", v_actions = "gait";
  auto* tv = subcommand(app, "train-vae", "train the in-betweening VAE", common);
  tv->add_option("--data", v_data)->required();
  tv->add_option("--out", v_out)->required();
  tv->add_option("--t-between", vcfg.t_between)->capture_default_str();
  tv->add_option("--t-start", vcfg.t_start)->capture_default_str();
  tv->add_option("--t-end", vcfg.t_end)->capture_default_str();
  tv->add_option("--width", vcfg.width)->capture_default_str();
  tv->add_option("--heads", vcfg.heads)->capture_default_str();
  tv->add_option("--layers", vcfg.layers)->capture_default_str();
  tv->add_option("--ffn", vcfg.ffn_width)->capture_default_str();
  tv->add_option("--latent", vcfg.latent)->capture_default_str();
  tv->add_option("--period", vcfg.period)->capture_default_str();
  tv->add_option("--mode", v_mode, "owm, no_ofe or mhsa")->capture_default_str();
  tv->add_option("--w-mse", vcfg.w_mse)->capture_default_str();
  tv->add_option("--w-kl", vcfg.w_kl)->capture_default_str();
  tv->add_option("--actions", v_actions)->capture_default_str();
  tv->add_option("--epochs", vopt.epochs)->capture_default_str();
  tv->add_option("--batch", vopt.batch_size)->capture_default_str();
  tv->add_option("--lr", vopt.lr)->capture_default_str();
  tv->add_option("--max-steps", vopt.max_steps)->capture_default_str();
  tv->callback([&] {
    run = [&] {
      vcfg.mode = decoder_mode_from_name(v_mode);
      vcfg.actions = parse_actions(v_actions);
      const auto data = restricted(load_dataset(v_data), vcfg.actions);
      AinbVae vae(vcfg, common.seed);
      vopt.seed = common.seed;
      vopt.on_step = [](std::size_t step, double loss) {
        if (step % 50 == 0) log("step " + std::to_string(step) + " loss " + std::to_string(loss));
      };
      const auto losses = train_vae(vae, data.train, vopt);
      vae.save(v_out);
      json j{{"out", v_out}, {"steps", losses.size()}, {"first_loss", losses.empty() ? 0.0 : losses.front()},
             {"last_loss", losses.empty() ? 0.0 : losses.back()}};
      if (!data.test.empty()) {
        const auto set = inbetween_contexts(data.test, vcfg);
        std::vector<MotionSequence> windows;
        for (std::size_t i = 0; i < set.contexts.size(); ++i) {
          MotionSequence w;
          w.label = vcfg.actions.at(set.labels[i]);
          w.frames = set.contexts[i].start;
          w.frames.insert(w.frames.end(), set.truth[i].begin(), set.truth[i].end());
          w.frames.insert(w.frames.end(), set.contexts[i].end.begin(), set.contexts[i].end.end());
          windows.push_back(std::move(w));
        }
        j["test_reconstruction_mse"] = vae_reconstruction_mse(vae, windows);
      }
      emit(j);
      return 0;
    };
  });

  // train-mdm
  MdmConfig mcfg;
  TrainMdmOptions mopt;
  std::string m_data, m_out, m_actions = "target";
  auto* tm = subcommand(app, "train-mdm", "train the target-motion diffusion model", common);
  tm->add_option("--data", m_data)->required();
  tm->add_option("--out", m_out)->required();
  tm->add_option("--width", mcfg.width)->capture_default_str();
  tm->add_option("--heads", mcfg.heads)->capture_default_str();
  tm->add_option("--layers", mcfg.layers)->capture_default_str();
  tm->add_option("--ffn", mcfg.ffn_width)->capture_default_str();
  tm->add_option("--frames", mcfg.frames)->capture_default_str();
  tm->add_option("--steps", mcfg.steps, "diffusion steps")->capture_default_str();
  tm->add_option("--beta-start", mcfg.beta_start)->capture_default_str();
  tm->add_option("--beta-end", mcfg.beta_end)->capture_default_str();
  tm->add_option("--actions", m_actions)->capture_default_str();
  tm->add_option("--epochs", mopt.epochs)->capture_default_str();
  tm->add_option("--batch", mopt.batch_size)->capture_default_str();
  tm->add_option("--lr", mopt.lr)->capture_default_str();
  tm->add_option("--max-steps", mopt.max_steps)->capture_default_str();
  tm->callback([&] {
    run = [&] {
      mcfg.actions = parse_actions(m_actions);
      const auto data = restricted(load_dataset(m_data), mcfg.actions);
      MotionDiffusion model(mcfg, common.seed);
      mopt.seed = common.seed;
      mopt.on_step = [](std::size_t step, double loss) {
        if (step % 50 == 0) log("step " + std::to_string(step) + " loss " + std::to_string(loss));
      };
      const auto losses = train_mdm(model, data.train, mopt);
      model.save(m_out);
      emit({{"out", m_out}, {"steps", losses.size()}, {"first_loss", losses.empty() ? 0.0 : losses.front()},
            {"last_loss", losses.empty() ? 0.0 : losses.back()}});
      return 0;
    };
  });

  // train-sampler
  SamplerConfig scfg;
  TrainSamplerOptions sopt;
  std::string s_data, s_vae, s_out;
  auto* ts = subcommand(app, "train-sampler", "train the diversity sampler on a frozen VAE", common);
  ts->add_option("--data", s_data)->required();
  ts->add_option("--vae", s_vae)->required();
  ts->add_option("--out", s_out)->required();
  ts->add_option("--branches", scfg.branches)->capture_default_str();
  ts->add_option("--hidden", scfg.hidden)->capture_default_str();
  ts->add_option("--w-div", scfg.w_div)->capture_default_str();
  ts->add_option("--w-kl", scfg.w_kl)->capture_default_str();
  ts->add_option("--epochs", sopt.epochs)->capture_default_str();
  ts->add_option("--batch", sopt.batch_size)->capture_default_str();
  ts->add_option("--lr", sopt.lr)->capture_default_str();
  ts->add_option("--max-steps", sopt.max_steps)->capture_default_str();
  ts->callback([&] {
    run = [&] {
      AinbVae vae = AinbVae::load(s_vae);
      const auto data = restricted(load_dataset(s_data), vae.config().actions);
      auto cfg = DiversitySampler::config_for(vae.config(), scfg.branches);
      cfg.hidden = scfg.hidden;
      cfg.w_div = scfg.w_div;
      cfg.w_kl = scfg.w_kl;
      DiversitySampler sampler(cfg, common.seed);
      sopt.seed = common.seed;
      sopt.on_step = [](std::size_t step, const SamplerStep& s) {
        if (step % 20 == 0) {
          log("step " + std::to_string(step) + " loss " + std::to_string(s.loss) + " kl " +
              std::to_string(s.mean_kl) + " min distance " + std::to_string(s.min_distance));
        }
      };
      const auto steps = train_sampler(sampler, vae, data.train, sopt);
      sampler.save(s_out);
      json j{{"out", s_out}, {"steps", steps.size()}};
      if (!steps.empty()) {
        j["last_loss"] = steps.back().loss;
        j["last_mean_kl"] = steps.back().mean_kl;
      }
      emit(j);
      return 0;
    };
  });

  // train-classifier
  ClassifierConfig ccfg;
  TrainClassifierOptions copt;
  std::string c_data, c_out, c_actions = "gait";
  auto* tc = subcommand(app, "train-classifier", "train the evaluation classifier", common);
  tc->add_option("--data", c_data)->required();
  tc->add_option("--out", c_out)->required();
  tc->add_option("--width", ccfg.width)->capture_default_str();
  tc->add_option("--heads", ccfg.heads)->capture_default_str();
  tc->add_option("--layers", ccfg.layers)->capture_default_str();
  tc->add_option("--ffn", ccfg.ffn_width)->capture_default_str();
  tc->add_option("--frames", ccfg.frames)->capture_default_str();
  tc->add_option("--actions", c_actions)->capture_default_str();
  tc->add_option("--epochs", copt.epochs)->capture_default_str();
  tc->add_option("--batch", copt.batch_size)->capture_default_str();
  tc->add_option("--lr", copt.lr)->capture_default_str();
  tc->callback([&] {
    run = [&] {
      ccfg.actions = parse_actions(c_actions);
      const auto data = restricted(load_dataset(c_data), ccfg.actions);
      ActionClassifier model(ccfg, common.seed);
      copt.seed = common.seed;
      copt.on_epoch = [](std::size_t e, double loss) { log("epoch " + std::to_string(e) + " loss " + std::to_string(loss)); };
      const auto rep = train_classifier(model, data.train, data.test, copt);
      model.save(c_out);
      emit({{"out", c_out}, {"train_accuracy", rep.train_accuracy}, {"test_accuracy", rep.test_accuracy}});
      return 0;
    };
  });

  // inbetween
  std::string i_vae, i_sampler, i_data, i_dir = ".", i_format = "jsonl", i_action;
  std::size_t i_index = 0, i_samples = 1;
  bool i_no_sampler = false;
  auto* ib = subcommand(app, "inbetween", "in-between a test window's start and end contexts", common);
  ib->add_option("--vae", i_vae)->required();
  ib->add_option("--sampler", i_sampler);
  ib->add_flag("--no-sampler", i_no_sampler);
  ib->add_option("--data", i_data)->required();
  ib->add_option("--index", i_index)->capture_default_str();
  ib->add_option("--action", i_action, "in-betweening action (default: the sequence's label)");
  ib->add_option("--samples", i_samples)->capture_default_str();
  ib->add_option("--out-dir", i_dir)->capture_default_str();
  ib->add_option("--format", i_format)->capture_default_str();
  ib->callback([&] {
    run = [&] {
      const auto fmt = export_format_from_name(i_format);
      InbetweenModel m{AinbVae::load(i_vae), std::nullopt};
      if (!i_sampler.empty()) m.sampler = DiversitySampler::load(i_sampler);
      const auto data = load_dataset(i_data);
      const auto& pool = data.test.empty() ? data.train : data.test;
      if (i_index >= pool.size()) throw ValidationError("index out of range");
      const auto set = inbetween_contexts({pool[i_index]}, m.vae.config());
      std::size_t label = set.labels[0];
      if (!i_action.empty()) label = m.vae.config().actions.index_of(action_from_name(i_action));
      const auto outs = generate_inbetweens(m, set.contexts[0], label, i_samples, common.seed, !i_no_sampler);
      fs::create_directories(i_dir);
      json files = json::array();
      for (std::size_t s = 0; s < outs.size(); ++s) {
        MotionSequence seq;
        seq.label = m.vae.config().actions.at(label);
        std::vector<Segment> tags;
        auto append = [&](const std::vector<Pose>& f, Segment t) {
          seq.frames.insert(seq.frames.end(), f.begin(), f.end());
          tags.resize(seq.frames.size(), t);
        };
        append(set.contexts[0].start, Segment::history);
        append(outs[s], Segment::transition);
        append(set.contexts[0].end, Segment::target);
        const auto file = fs::path(i_dir) / ("inbetween_" + std::to_string(s) + extension(fmt));
        export_frames(seq, tags, file, fmt);
        files.push_back(file.string());
      }
      json manifest{{"request", {{"vae", i_vae}, {"sampler", i_sampler}, {"data", i_data}, {"index", i_index},
                                 {"action", action_name(m.vae.config().actions.at(label))}, {"samples", i_samples}}},
                    {"seeds", {common.seed}},
                    {"files", files}};
      emit(manifest, (fs::path(i_dir) / "manifest.json").string());
      return 0;
    };
  });

  // predict
  ModelPaths p_models;
  HistoryArgs p_hist;
  std::string p_future = "Wave", p_inb, p_dir = ".", p_format = "jsonl";
  std::size_t p_tb = 40, p_samples = 1;
  std::optional<std::size_t> p_branch;
  auto* pr = subcommand(app, "predict", "two-stage action-driven prediction", common);
  p_models.add_to(pr, true);
  p_hist.add_to(pr);
  pr->add_option("--future-action", p_future)->capture_default_str();
  pr->add_option("--inbetween-action", p_inb, "default: the history's label");
  pr->add_option("--tb", p_tb, "transition length")->capture_default_str();
  pr->add_option("--samples", p_samples)->capture_default_str();
  pr->add_option("--branch", p_branch, "fixed sampler branch");
  pr->add_option("--out-dir", p_dir)->capture_default_str();
  pr->add_option("--format", p_format)->capture_default_str();
  pr->callback([&] {
    run = [&] {
      const auto fmt = export_format_from_name(p_format);
      const Models models = p_models.load();
      PredictionRequest req;
      req.history = p_hist.load();
      req.future_action = action_from_name(p_future);
      req.inbetween_action = p_inb.empty() ? req.history.label : action_from_name(p_inb);
      req.t_b = p_tb;
      req.samples = p_samples;
      req.seed = common.seed;
      req.use_sampler = !p_models.no_sampler;
      req.branch = p_branch;
      const auto preds = predict_samples(req, models);
      fs::create_directories(p_dir);
      json files = json::array(), seeds = json::array(), segments = json::array();
      for (std::size_t s = 0; s < preds.size(); ++s) {
        const auto file = fs::path(p_dir) / ("prediction_" + std::to_string(s) + extension(fmt));
        export_frames(preds[s].motion, preds[s].tags, file, fmt);
        files.push_back(file.string());
        seeds.push_back(preds[s].seed);
        segments.push_back(tags_json(preds[s].tags));
      }
      json manifest{{"request",
                     {{"history", p_hist.path}, {"index", p_hist.index}, {"history_frames", req.history.frames.size()},
                      {"future_action", action_name(req.future_action)},
                      {"inbetween_action", action_name(req.inbetween_action)}, {"t_b", p_tb},
                      {"samples", p_samples}, {"seed", common.seed}, {"sampler", req.use_sampler}}},
                    {"seeds", seeds},
                    {"files", files},
                    {"segments", segments}};
      emit(manifest, (fs::path(p_dir) / "manifest.json").string());
      return 0;
    };
  });

  // rollout
  ModelPaths r_models;
  HistoryArgs r_hist;
  std::string r_steps, r_out, r_format = "jsonl";
  std::size_t r_tb = 40;
  auto* ro = subcommand(app, "rollout", "long-term prediction from a series of action pairs", common);
  r_models.add_to(ro, true);
  r_hist.add_to(ro);
  ro->add_option("--steps", r_steps, "future:inbetween pairs, comma separated (e.g. Wave:Walk,Reach:Step)")->required();
  ro->add_option("--tb", r_tb)->capture_default_str();
  ro->add_option("--out", r_out)->required();
  ro->add_option("--format", r_format)->capture_default_str();
  ro->callback([&] {
    run = [&] {
      const auto fmt = export_format_from_name(r_format);
      std::vector<RolloutStep> steps;
      std::stringstream ss(r_steps);
      std::string pair;
      while (std::getline(ss, pair, ',')) {
        const auto colon = pair.find(':');
        if (colon == std::string::npos) throw ValidationError("step '" + pair + "' is not future:inbetween");
        steps.push_back({action_from_name(pair.substr(0, colon)), action_from_name(pair.substr(colon + 1))});
      }
      const Models models = r_models.load();
      const auto history = r_hist.load();
      const auto r = long_term_rollout(history, steps, models, r_tb, common.seed, !r_models.no_sampler);
      if (fs::path(r_out).has_parent_path()) fs::create_directories(fs::path(r_out).parent_path());
      export_frames(r.motion, r.tags, r_out, fmt);
      emit({{"request", {{"history", r_hist.path}, {"index", r_hist.index}, {"steps", r_steps}, {"t_b", r_tb},
                         {"seed", common.seed}}},
            {"seeds", {common.seed}},
            {"files", {r_out}},
            {"frames", r.motion.frames.size()},
            {"segments", tags_json(r.tags)}});
      return 0;
    };
  });

  // eval
  std::string e_task = "inbetween", e_data, e_target, e_clf, e_out;
  ModelPaths e_models;
  EvalOptions eopt;
  std::size_t e_tb = 20;
  auto* ev = subcommand(app, "eval", "compute FID, AF, ADE, APD and foot skate", common);
  ev->add_option("--task", e_task, "inbetween or predict")->capture_default_str();
  ev->add_option("--data", e_data, "real data; histories for predict")->required();
  ev->add_option("--target-data", e_target, "target-action data (predict)");
  ev->add_option("--classifier", e_clf)->required();
  ev->add_option("--mdm", e_models.mdm);
  ev->add_option("--vae", e_models.vae)->required();
  ev->add_option("--sampler", e_models.sampler);
  ev->add_flag("--no-sampler", e_models.no_sampler);
  ev->add_option("--tb", e_tb)->capture_default_str();
  ev->add_option("--samples", eopt.samples)->capture_default_str();
  ev->add_option("--contexts", eopt.contexts, "0 = every test sequence")->capture_default_str();
  ev->add_flag("--ground-truth", eopt.ground_truth, "score ground truth as the prediction");
  ev->add_option("--out", e_out, "also write the report here");
  ev->callback([&] {
    run = [&] {
      eopt.seed = common.seed;
      eopt.use_sampler = !e_models.no_sampler;
      const auto clf = ActionClassifier::load(e_clf);
      const Models models = e_models.load();
      MetricsReport rep;
      if (e_task == "inbetween") {
        const auto& m = models.for_length(e_tb);
        rep = evaluate_inbetween(m, clf, restricted(load_dataset(e_data), m.vae.config().actions), eopt);
      } else if (e_task == "predict") {
        if (e_target.empty()) throw ValidationError("--task predict needs --target-data");
        const auto& vae_actions = models.for_length(e_tb).vae.config().actions;
        rep = evaluate_prediction(models, e_tb, clf, restricted(load_dataset(e_data), vae_actions),
                                  restricted(load_dataset(e_target), models.diffusion().config().actions), eopt);
      } else {
        throw ValidationError("unknown task '" + e_task + "' (inbetween or predict)");
      }
      auto j = metrics_to_json(rep);
      j["task"] = e_task;
      emit(j, e_out);
      return 0;
    };
  });

  // grad-check
  std::size_t g_seeds = 20;
  double g_tol = 1e-3;
  std::vector<std::string> g_cases;
  auto* gc = subcommand(app, "grad-check", "finite-difference check of every layer and loss", common);
  gc->add_option("--seeds", g_seeds)->capture_default_str();
  gc->add_option("--tolerance", g_tol)->capture_default_str();
  gc->add_option("--case", g_cases, "restrict to these cases")->check(CLI::IsMember(grad_suite_cases()));
  gc->callback([&] {
    run = [&] {
      const auto rep = run_grad_suite(g_seeds, g_tol, g_cases, [](const GradSuiteEntry& e) {
        if (!e.passed) log("FAIL " + e.name + " seed " + std::to_string(e.seed) + " rel " + std::to_string(e.max_rel_error));
      });
      json cases = json::object();
      for (const auto& e : rep.entries) {
        if (!cases.contains(e.name)) cases[e.name] = {{"max_rel_error", 0.0}, {"passed", true}};
        auto& c = cases[e.name];
        c["max_rel_error"] = std::max(c["max_rel_error"].get<double>(), e.max_rel_error);
        c["passed"] = c["passed"].get<bool>() && e.passed;
      }
      emit({{"passed", rep.passed}, {"max_rel_error", rep.max_rel_error}, {"seconds", rep.seconds},
            {"tolerance", g_tol}, {"seeds", g_seeds}, {"cases", cases}});
      return rep.passed ? 0 : 1;
    };
  });

  try {
    auto args = inject_config(app, std::vector<std::string>(argv + 1, argv + argc));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  try {
    return run ? run() : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
