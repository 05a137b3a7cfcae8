#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "grab/cli.hpp"
#include "grab/datagen.hpp"
#include "grab/error.hpp"
#include "grab/evalr.hpp"
#include "grab/gradcheck.hpp"
#include "grab/mask_text.hpp"
#include "grab/run_config.hpp"
#include "grab/sts.hpp"

namespace py = pybind11;
using namespace grab;

namespace {

template <typename T>
std::pair<std::vector<double>, std::vector<int>> score_typed(const std::string& ckpt, const std::string& log,
                                                             int token_budget) {
  auto st = load_checkpoint<T>(ckpt);
  const auto events = read_log(log);
  const auto inst = instances_from_log(events, FeatureSchema::standard(), st.params.cfg.table_rows);
  std::vector<double> scores;
  std::vector<int> labels;
  score_instances(st.params, inst, token_budget, scores, labels);
  return {scores, labels};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "grab_lab core bindings";

  static py::exception<Error> grab_error(m, "GrabError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(grab_error.ptr(), (std::string(to_string(e.kind())) + ": " + e.what()).c_str());
    }
  });

  m.def("format_config", [](const std::string& text) { return format_run_config(parse_run_config(text)); },
        py::arg("text"), "Parse a run config and print every key with its value.");

  m.def(
      "generate_log_lines",
      [](const std::string& text, int threads) {
        const RunConfig cfg = parse_run_config(text);
        std::vector<Event> events;
        {
          py::gil_scoped_release release;
          events = generate_log(cfg.gen, threads);
        }
        std::vector<std::string> out;
        out.reserve(events.size());
        for (const auto& e : events) out.push_back(to_json_line(e));
        return out;
      },
      py::arg("config_text") = "", py::arg("threads") = 1, "JSON lines of the log described by gen.* keys.");

  m.def("auc", [](const std::vector<double>& s, const std::vector<int>& y) { return auc(s, y); }, py::arg("scores"),
        py::arg("labels"));
  m.def("spearman", [](const std::vector<double>& x, const std::vector<double>& y) { return spearman(x, y); },
        py::arg("x"), py::arg("y"));

  m.def(
      "measure_skew",
      [](const std::vector<std::uint64_t>& users) {
        const auto r = measure_skew(users);
        py::dict d;
        d["n_tokens"] = r.n_tokens;
        d["n_users"] = r.n_users;
        d["concentration"] = r.concentration;
        d["effective_users"] = r.effective_users;
        return d;
      },
      py::arg("token_users"), "Concentration and effective user count of one batch.");

  m.def(
      "mask_grids",
      [](const std::string& layout_text) {
        const auto spec = parse_layout_spec(layout_text);
        py::dict d;
        for (const auto& [name, mask] : layout_masks(spec)) {
          std::vector<std::vector<bool>> rows(mask.rows(), std::vector<bool>(mask.cols()));
          for (Eigen::Index i = 0; i < mask.rows(); ++i)
            for (Eigen::Index j = 0; j < mask.cols(); ++j) rows[i][j] = mask(i, j);
          d[py::str(name)] = rows;
        }
        return d;
      },
      py::arg("layout_text"), "causal, het, window and model masks of a layout description.");

  m.def(
      "score",
      [](const std::string& ckpt, const std::string& log, int token_budget) {
        py::gil_scoped_release release;
        return checkpoint_precision(ckpt) == num::Precision::kDouble ? score_typed<double>(ckpt, log, token_budget)
                                                                      : score_typed<float>(ckpt, log, token_budget);
      },
      py::arg("ckpt"), py::arg("log"), py::arg("token_budget") = 4096,
      "Candidate scores and labels of a JSONL log under a checkpoint.");

  m.def(
      "grad_check",
      [](std::size_t max_entries) {
        ModelGradCheckConfig cfg;
        cfg.max_entries_per_param = max_entries;
        std::vector<GradCheckGroup> groups;
        {
          py::gil_scoped_release release;
          groups = model_grad_check(cfg);
        }
        py::dict d;
        for (const auto& g : groups) d[py::str(g.group)] = g.report.max_rel_err;
        return d;
      },
      py::arg("max_entries") = 0, "Worst relative gradient error per parameter group.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a grab_lab subcommand; returns (exit code, stdout, stderr).");
}
