#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "motionpred/dataset.hpp"
#include "motionpred/error.hpp"
#include "motionpred/evaluate.hpp"
#include "motionpred/grad_suite.hpp"

namespace py = pybind11;
using namespace motionpred;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// nlohmann <-> Python objects through the json module
py::object to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

Array frames_to_array(const std::vector<Pose>& frames) {
  Array out({frames.size(), kPoseDim});
  auto m = out.mutable_unchecked<2>();
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto v = pose_vectorize(frames[t]);
    for (std::size_t i = 0; i < kPoseDim; ++i) m(t, i) = v[i];
  }
  return out;
}

std::vector<Pose> array_to_frames(const Array& a) {
  if (a.ndim() != 2 || static_cast<std::size_t>(a.shape(1)) != kPoseDim)
    throw ValidationError("expected an array of shape [frames, " + std::to_string(kPoseDim) + "]");
  std::vector<Pose> out;
  const auto m = a.unchecked<2>();
  for (py::ssize_t t = 0; t < a.shape(0); ++t) out.push_back(pose_devectorize(std::span<const double>(m.data(t, 0), kPoseDim)));
  return out;
}

std::vector<std::vector<Pose>> arrays_to_clips(const std::vector<Array>& arrays) {
  std::vector<std::vector<Pose>> out;
  for (const auto& a : arrays) out.push_back(array_to_frames(a));
  return out;
}

Eigen::MatrixXd to_matrix(const Array& a) {
  if (a.ndim() != 2) throw ValidationError("expected a 2-D array");
  Eigen::MatrixXd m(a.shape(0), a.shape(1));
  const auto v = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    for (py::ssize_t j = 0; j < a.shape(1); ++j) m(i, j) = v(i, j);
  return m;
}

Array from_matrix(const Eigen::MatrixXd& m) {
  Array out({m.rows(), m.cols()});
  auto v = out.mutable_unchecked<2>();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v(i, j) = m(i, j);
  return out;
}

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

Array from_vector(const std::vector<double>& v) {
  Array out(v.size());
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

ContextPair context(const Array& start, const Array& end) { return {array_to_frames(start), array_to_frames(end)}; }

std::vector<std::string> tag_names(const std::vector<Segment>& tags) {
  std::vector<std::string> out;
  for (auto t : tags) out.push_back(segment_name(t));
  return out;
}

py::dict prediction_dict(const Prediction& p) {
  py::dict d;
  d["motion"] = frames_to_array(p.motion.frames);
  d["tags"] = tag_names(p.tags);
  d["seed"] = p.seed;
  d["branch"] = p.branch ? py::object(py::int_(*p.branch)) : py::none();
  return d;
}

py::dict split_dict(const DatasetSplit& s) {
  py::dict d;
  d["train"] = s.train;
  d["test"] = s.test;
  return d;
}

std::vector<Action> actions_of(const std::vector<std::string>& names) {
  std::vector<Action> out;
  for (const auto& n : names) out.push_back(action_from_name(n));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Action-conditioned motion in-betweening and two-stage prediction";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());

  m.attr("POSE_DIM") = kPoseDim;
  m.attr("JOINTS") = kJoints;
  m.attr("FPS") = kFps;

  m.def("action_names", [] {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < kActionCount; ++i) out.push_back(action_name(action_from_index(i)));
    return out;
  });
  m.def("gait_actions", [] { return gait_actions().names(); });
  m.def("target_actions", [] { return target_actions().names(); });

  py::class_<MotionSequence>(m, "MotionSequence")
      .def(py::init([](const Array& frames, const std::string& label, double fps, const std::string& id) {
             MotionSequence s;
             s.frames = array_to_frames(frames);
             s.label = action_from_name(label);
             s.fps = fps;
             s.id = id;
             return s;
           }),
           py::arg("frames"), py::arg("label"), py::arg("fps") = kFps, py::arg("id") = "")
      .def_readwrite("id", &MotionSequence::id)
      .def_readwrite("fps", &MotionSequence::fps)
      .def_readwrite("split", &MotionSequence::split)
      .def_property(
          "label", [](const MotionSequence& s) { return action_name(s.label); },
          [](MotionSequence& s, const std::string& n) { s.label = action_from_name(n); })
      .def_property(
          "frames", [](const MotionSequence& s) { return frames_to_array(s.frames); },
          [](MotionSequence& s, const Array& a) { s.frames = array_to_frames(a); })
      .def("__len__", &MotionSequence::size)
      .def("__repr__", [](const MotionSequence& s) {
        return "<MotionSequence " + s.id + " " + action_name(s.label) + " " + std::to_string(s.size()) + " frames>";
      });

  m.def(
      "synth_generate",
      [](const std::string& action, std::size_t frames, double turn, std::uint64_t seed, double noise) {
        SynthOptions o;
        o.noise = noise;
        return synth_generate(action_from_name(action), frames, turn, seed, o);
      },
      py::arg("action"), py::arg("frames"), py::arg("turn") = 0.0, py::arg("seed") = 0, py::arg("noise") = 0.01);
  m.def(
      "generate_dataset",
      [](const std::vector<std::string>& actions, std::size_t per_action, std::size_t frames, double turn_range,
         double test_fraction, std::uint64_t seed) {
        GenDataOptions g;
        g.actions = actions_of(actions);
        g.per_action = per_action;
        g.frames = frames;
        g.turn_range = turn_range;
        g.test_fraction = test_fraction;
        g.seed = seed;
        return split_dict(generate_dataset(g));
      },
      py::arg("actions"), py::arg("per_action") = 100, py::arg("frames") = 90, py::arg("turn_range") = 1.0,
      py::arg("test_fraction") = 0.2, py::arg("seed") = 0);
  m.def("load_dataset", [](const std::filesystem::path& p) { return split_dict(load_dataset(p)); });
  m.def(
      "save_dataset",
      [](const std::vector<MotionSequence>& train, const std::vector<MotionSequence>& test,
         const std::filesystem::path& p) {
        DatasetSplit s{train, test, compute_norm_stats(train)};
        save_dataset(s, p);
      },
      py::arg("train"), py::arg("test"), py::arg("path"));
  m.def("forward_kinematics", [](const Array& pose) {
    const auto points = forward_kinematics(pose_devectorize(std::span<const double>(pose.data(), kPoseDim)));
    Array out({points.size(), std::size_t{3}});
    auto v = out.mutable_unchecked<2>();
    for (std::size_t i = 0; i < points.size(); ++i)
      for (int k = 0; k < 3; ++k) v(i, k) = points[i][k];
    return out;
  });
  m.def("mean_frame_motion", &mean_frame_motion);

  m.def("matrix_sqrt_psd", [](const Array& a) { return from_matrix(matrix_sqrt_psd(to_matrix(a))); });
  m.def("fid", [](const Array& mu_g, const Array& cov_g, const Array& mu_r, const Array& cov_r) {
    const auto vec = [](const Array& a) {
      const auto v = to_vector(a);
      return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    return fid({vec(mu_g), to_matrix(cov_g), 0}, {vec(mu_r), to_matrix(cov_r), 0});
  });
  m.def("ade", [](const Array& s, const Array& gt) { return ade(array_to_frames(s), array_to_frames(gt)); });
  m.def("ade_min", [](const std::vector<Array>& s, const Array& gt) {
    return ade_min(arrays_to_clips(s), array_to_frames(gt));
  });
  m.def("apd", [](const std::vector<Array>& s) { return apd(arrays_to_clips(s)); });
  m.def(
      "foot_skate", [](const Array& frames, double fps) { return foot_skate(array_to_frames(frames), fps); },
      py::arg("frames"), py::arg("fps") = kFps);
  m.def("kl_diag_gaussians", [](const Array& mq, const Array& sq, const Array& mp, const Array& sp) {
    return kl_diag_gaussians(to_vector(mq), to_vector(sq), to_vector(mp), to_vector(sp));
  });

  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def(py::init(&make_schedule), py::arg("steps") = 1000, py::arg("beta_start") = 1e-4,
           py::arg("beta_end") = 0.02)
      .def_readonly("steps", &NoiseSchedule::steps)
      .def("alpha_bar", &NoiseSchedule::alpha_bar)
      .def("beta", &NoiseSchedule::beta)
      .def("diffuse_to_t", [](const NoiseSchedule& s, const Array& y0, std::size_t t, const Array& eps) {
        return from_vector(diffuse_to_t(to_vector(y0), t, s, to_vector(eps)));
      })
      .def("diffuse_step", [](const NoiseSchedule& s, const Array& y, std::size_t t, const Array& eps) {
        return from_vector(diffuse_step(to_vector(y), t, s, to_vector(eps)));
      });

  py::class_<AinbVae>(m, "AinbVae")
      .def(py::init([](const py::dict& config, std::uint64_t seed) {
             return AinbVae(vae_config_from_json(from_py(config)), seed);
           }),
           py::arg("config") = py::dict(), py::arg("seed") = 0)
      .def_static("load", &AinbVae::load)
      .def("save", &AinbVae::save)
      .def_property_readonly("config", [](const AinbVae& v) { return to_py(vae_config_to_json(v.config())); })
      .def_property_readonly("parameter_count", [](const AinbVae& v) { return v.params().parameter_count(); })
      .def(
          "fit",
          [](AinbVae& v, const std::vector<MotionSequence>& train, std::size_t epochs, std::size_t batch_size,
             double lr, std::uint64_t seed, std::size_t max_steps) {
            if (v.norm().empty()) v.set_norm(window_norm_stats(train, v.config()));
            TrainVaeOptions o;
            o.epochs = epochs;
            o.batch_size = batch_size;
            o.lr = lr;
            o.seed = seed;
            o.max_steps = max_steps;
            return train_vae(v, train, o);
          },
          py::arg("train"), py::arg("epochs") = 10, py::arg("batch_size") = 32, py::arg("lr") = 1e-3,
          py::arg("seed") = 0, py::arg("max_steps") = 0, py::call_guard<py::gil_scoped_release>())
      .def("reconstruction_mse",
           [](const AinbVae& v, const std::vector<MotionSequence>& windows) { return vae_reconstruction_mse(v, windows); })
      .def(
          "sample_inbetween",
          [](const AinbVae& v, const Array& start, const Array& end, const std::string& action, std::uint64_t seed) {
            return frames_to_array(
                v.sample_inbetween(context(start, end), v.config().actions.index_of(action_from_name(action)), seed));
          },
          py::arg("start"), py::arg("end"), py::arg("action"), py::arg("seed") = 0);

  py::class_<DiversitySampler>(m, "DiversitySampler")
      .def(py::init([](const AinbVae& vae, std::size_t branches, std::uint64_t seed) {
             return DiversitySampler(DiversitySampler::config_for(vae.config(), branches), seed);
           }),
           py::arg("vae"), py::arg("branches") = 5, py::arg("seed") = 0)
      .def_static("load", &DiversitySampler::load)
      .def("save", &DiversitySampler::save)
      .def_property_readonly("config",
                             [](const DiversitySampler& s) { return to_py(sampler_config_to_json(s.config())); })
      .def(
          "fit",
          [](DiversitySampler& s, AinbVae& vae, const std::vector<MotionSequence>& train, std::size_t epochs,
             std::size_t batch_size, double lr, std::uint64_t seed, std::size_t max_steps) {
            TrainSamplerOptions o;
            o.epochs = epochs;
            o.batch_size = batch_size;
            o.lr = lr;
            o.seed = seed;
            o.max_steps = max_steps;
            std::vector<double> kl;
            for (const auto& step : train_sampler(s, vae, train, o)) kl.push_back(step.mean_kl);
            return kl;
          },
          py::arg("vae"), py::arg("train"), py::arg("epochs") = 30, py::arg("batch_size") = 32, py::arg("lr") = 0.01,
          py::arg("seed") = 0, py::arg("max_steps") = 0, py::call_guard<py::gil_scoped_release>())
      .def(
          "sample",
          [](const DiversitySampler& s, const AinbVae& vae, const Array& start, const Array& end,
             const std::string& action, std::uint64_t seed) {
            std::vector<Array> out;
            for (const auto& y : s.sample(vae, context(start, end), vae.config().actions.index_of(action_from_name(action)), seed))
              out.push_back(frames_to_array(y));
            return out;
          },
          py::arg("vae"), py::arg("start"), py::arg("end"), py::arg("action"), py::arg("seed") = 0);

  py::class_<MotionDiffusion>(m, "MotionDiffusion")
      .def(py::init([](const py::dict& config, std::uint64_t seed) {
             return MotionDiffusion(mdm_config_from_json(from_py(config)), seed);
           }),
           py::arg("config") = py::dict(), py::arg("seed") = 0)
      .def_static("load", &MotionDiffusion::load)
      .def("save", &MotionDiffusion::save)
      .def_property_readonly("config", [](const MotionDiffusion& d) { return to_py(mdm_config_to_json(d.config())); })
      .def(
          "fit",
          [](MotionDiffusion& d, const std::vector<MotionSequence>& train, std::size_t epochs, std::size_t batch_size,
             double lr, std::uint64_t seed, std::size_t max_steps) {
            TrainMdmOptions o;
            o.epochs = epochs;
            o.batch_size = batch_size;
            o.lr = lr;
            o.seed = seed;
            o.max_steps = max_steps;
            return train_mdm(d, train, o);
          },
          py::arg("train"), py::arg("epochs") = 10, py::arg("batch_size") = 32, py::arg("lr") = 1e-3,
          py::arg("seed") = 0, py::arg("max_steps") = 0, py::call_guard<py::gil_scoped_release>())
      .def(
          "sample",
          [](const MotionDiffusion& d, const std::string& action, std::uint64_t seed) {
            return frames_to_array(d.sample(d.config().actions.index_of(action_from_name(action)), seed).frames);
          },
          py::arg("action"), py::arg("seed") = 0);

  py::class_<ActionClassifier>(m, "ActionClassifier")
      .def(py::init([](const py::dict& config, std::uint64_t seed) {
             return ActionClassifier(classifier_config_from_json(from_py(config)), seed);
           }),
           py::arg("config") = py::dict(), py::arg("seed") = 0)
      .def_static("load", &ActionClassifier::load)
      .def("save", &ActionClassifier::save)
      .def_property_readonly("config",
                             [](const ActionClassifier& c) { return to_py(classifier_config_to_json(c.config())); })
      .def(
          "fit",
          [](ActionClassifier& c, const std::vector<MotionSequence>& train, const std::vector<MotionSequence>& test,
             std::size_t epochs, std::size_t batch_size, double lr, std::uint64_t seed) {
            TrainClassifierOptions o;
            o.epochs = epochs;
            o.batch_size = batch_size;
            o.lr = lr;
            o.seed = seed;
            const auto r = train_classifier(c, train, test, o);
            return std::make_tuple(r.train_accuracy, r.test_accuracy);
          },
          py::arg("train"), py::arg("test"), py::arg("epochs") = 20, py::arg("batch_size") = 32, py::arg("lr") = 1e-3,
          py::arg("seed") = 0, py::call_guard<py::gil_scoped_release>())
      .def("predict",
           [](const ActionClassifier& c, const std::vector<Array>& clips) {
             std::vector<std::string> out;
             for (auto i : c.predict(arrays_to_clips(clips))) out.push_back(action_name(c.config().actions.at(i)));
             return out;
           })
      .def("accuracy", &ActionClassifier::accuracy);

  py::class_<Models>(m, "Models")
      .def(py::init([](const py::dict& run_config) { return load_models(run_config_from_json(from_py(run_config))); }),
           py::arg("run_config"))
      .def_property_readonly("lengths", &Models::lengths)
      .def(
          "predict",
          [](const Models& models, const MotionSequence& history, const std::string& future,
             const std::string& inbetween, std::size_t t_b, std::size_t samples, std::uint64_t seed, bool use_sampler,
             std::optional<std::size_t> branch) {
            PredictionRequest r;
            r.history = history;
            r.future_action = action_from_name(future);
            r.inbetween_action = action_from_name(inbetween);
            r.t_b = t_b;
            r.samples = samples;
            r.seed = seed;
            r.use_sampler = use_sampler;
            r.branch = branch;
            const auto preds = predict_samples(r, models);
            py::list out;
            for (const auto& p : preds) out.append(prediction_dict(p));
            return out;
          },
          py::arg("history"), py::arg("future_action") = "Wave", py::arg("inbetween_action") = "Walk",
          py::arg("t_b") = 40, py::arg("samples") = 1, py::arg("seed") = 0, py::arg("use_sampler") = true,
          py::arg("branch") = py::none())
      .def(
          "rollout",
          [](const Models& models, const MotionSequence& history,
             const std::vector<std::pair<std::string, std::string>>& steps, std::size_t t_b, std::uint64_t seed,
             bool use_sampler) {
            std::vector<RolloutStep> s;
            for (const auto& [f, b] : steps) s.push_back({action_from_name(f), action_from_name(b)});
            const auto r = long_term_rollout(history, s, models, t_b, seed, use_sampler);
            py::dict d;
            d["motion"] = frames_to_array(r.motion.frames);
            d["tags"] = tag_names(r.tags);
            return d;
          },
          py::arg("history"), py::arg("steps"), py::arg("t_b") = 40, py::arg("seed") = 0,
          py::arg("use_sampler") = true);

  m.def(
      "export_frames",
      [](const Array& frames, const std::vector<std::string>& tags, const std::filesystem::path& path,
         const std::string& format, double fps) {
        MotionSequence s;
        s.frames = array_to_frames(frames);
        s.fps = fps;
        std::vector<Segment> t;
        for (const auto& n : tags) t.push_back(segment_from_name(n));
        export_frames(s, t, path, export_format_from_name(format));
      },
      py::arg("frames"), py::arg("tags"), py::arg("path"), py::arg("format") = "jsonl", py::arg("fps") = kFps);

  m.def(
      "run_grad_suite",
      [](std::size_t seeds, double tolerance, const std::vector<std::string>& only) {
        const auto r = run_grad_suite(seeds, tolerance, only);
        py::dict d;
        d["passed"] = r.passed;
        d["max_rel_error"] = r.max_rel_error;
        d["seconds"] = r.seconds;
        d["runs"] = r.entries.size();
        return d;
      },
      py::arg("seeds") = 20, py::arg("tolerance") = 1e-3, py::arg("only") = std::vector<std::string>{});
  m.def("grad_suite_cases", &grad_suite_cases);
}
