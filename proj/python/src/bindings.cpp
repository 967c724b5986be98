#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cmath>

#include "clf/cli_runner.hpp"
#include "clf/replay_methods.hpp"

namespace py = pybind11;
using namespace clf;

namespace {

// NaN marks cells that were never filled.
AccuracyMatrix matrix_from(const Matrix& m) {
    if (m.rows() != m.cols()) throw ContractError("accuracy matrix must be square");
    AccuracyMatrix out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index j = 0; j < m.rows(); ++j) {
        for (Eigen::Index i = 0; i <= j; ++i) {
            if (!std::isnan(m(j, i))) out.set(static_cast<std::size_t>(j), static_cast<std::size_t>(i), m(j, i));
        }
    }
    return out;
}

Matrix matrix_to(const AccuracyMatrix& a) {
    const auto n = static_cast<Eigen::Index>(a.tasks());
    Matrix m = Matrix::Constant(n, n, std::nan(""));
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index i = 0; i <= j; ++i) {
            if (a.has(static_cast<std::size_t>(j), static_cast<std::size_t>(i))) {
                m(j, i) = a.at(static_cast<std::size_t>(j), static_cast<std::size_t>(i));
            }
        }
    }
    return m;
}

py::dict summary_dict(const RunSummary& s) {
    py::dict d;
    d["tasks_done"] = s.tasks_done;
    d["avg_acc"] = s.avg_acc;
    d["avg_forgetting"] = s.avg_forgetting;
    d["matrix"] = matrix_to(s.matrix);
    return d;
}

HyperSet hyper_from(const std::vector<py::dict>& items) {
    HyperSet h;
    for (const auto& d : items) {
        HyperParam p;
        p.name = d["name"].cast<std::string>();
        p.value = d["value"].cast<double>();
        p.forgetting = d.contains("forgetting") ? d["forgetting"].cast<bool>() : true;
        if (d.contains("floor")) p.floor = d["floor"].cast<double>();
        if (d.contains("decay")) p.decay = d["decay"].cast<double>();
        h.add(p);
    }
    return h;
}

py::dict hyper_values(const HyperSet& h) {
    py::dict d;
    for (const auto& p : h.items()) d[py::str(p.name)] = p.value;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Continual-learning framework core";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    py::register_exception<clf::RuntimeError>(m, "RunError", PyExc_RuntimeError);

    // Experiments
    m.def("config_echo", [](const std::filesystem::path& p) { return config_echo(load_config(p)).dump(); },
          py::arg("config"), "Config with defaults filled in, as JSON text.");
    m.def("config_hash", [](const std::filesystem::path& p) { return config_hash(load_config(p)); }, py::arg("config"));
    m.def(
        "run",
        [](const std::filesystem::path& config, std::optional<std::size_t> workers,
           std::optional<std::filesystem::path> resume, std::optional<std::size_t> stop_after) {
            const auto cfg = load_config(config);
            const std::size_t w = workers ? *workers : workers_from_env();
            RunSummary s;
            {
                py::gil_scoped_release release;
                s = run_experiment(cfg, w, resume, stop_after);
            }
            return summary_dict(s);
        },
        py::arg("config"), py::arg("workers") = py::none(), py::arg("resume") = py::none(),
        py::arg("stop_after") = py::none());
    m.def("report", [](const std::filesystem::path& dir) { return summary_dict(regenerate_reports(dir)); },
          py::arg("out_dir"));
    m.def("ledger", [](const std::filesystem::path& p) { return ledger_report(load_config(p)); }, py::arg("config"));
    m.def("capacity", &capacity_report_csv, py::arg("out_dir"));
    m.def("latest_checkpoint", &latest_checkpoint, py::arg("out_dir"));
    m.def("workers_from_env", &workers_from_env);
    m.def("method_ids", &method_ids);

    // Metrics and reporting
    m.def("avg_accuracy", [](const Matrix& a) { return avg_accuracy(matrix_from(a), static_cast<std::size_t>(a.rows())); },
          py::arg("matrix"));
    m.def(
        "avg_forgetting",
        [](const Matrix& a, bool include_last) {
            return avg_forgetting(matrix_from(a), static_cast<std::size_t>(a.rows()), include_last);
        },
        py::arg("matrix"), py::arg("include_last") = false);
    m.def("format_result", &format_result, py::arg("acc_fraction"), py::arg("forgetting_pct"));
    m.def("ledger_methods", &ledger_methods);
    m.def(
        "storage_ledger",
        [](const std::string& method, double T, double M, double R, double A, double U, double M_bit) {
            const auto e = storage_ledger(method, LedgerInput{T, M, R, A, U, M_bit});
            return py::make_tuple(e.bytes, e.formula);
        },
        py::arg("method"), py::kw_only(), py::arg("T") = 0.0, py::arg("M") = 0.0, py::arg("R") = 0.0,
        py::arg("A") = 0.0, py::arg("U") = 0.0, py::arg("M_bit") = 0.0);

    // Building blocks
    m.def("herding_select", &herding_select, py::arg("features"), py::arg("m"));
    m.def(
        "gem_project",
        [](const Vector& g, const Matrix& G, double gamma) {
            const auto p = gem_project(g, G, gamma);
            return py::make_tuple(p.g, p.projected);
        },
        py::arg("g"), py::arg("G"), py::arg("gamma") = 0.0);
    m.def(
        "stability_decay",
        [](const std::vector<py::dict>& hyper, double a_star, double p, double alpha, const py::function& train) {
            const auto out = stability_decay(hyper_from(hyper), a_star, p, alpha,
                                             [&](const HyperSet& h, std::size_t k) {
                                                 return train(hyper_values(h), k).cast<double>();
                                             });
            py::list attempts;
            for (const auto& a : out.attempts) {
                py::dict d;
                d["hyper"] = hyper_values(a.hyper);
                d["val_acc"] = a.val_acc;
                d["round"] = a.round;
                d["decision"] = a.decision;
                attempts.append(d);
            }
            py::dict d;
            d["hyper"] = hyper_values(out.hyper);
            d["accepted"] = out.accepted;
            d["floor_terminated"] = out.floor_terminated;
            d["rounds"] = out.rounds;
            d["attempts"] = attempts;
            return d;
        },
        py::arg("hyper"), py::arg("a_star"), py::arg("p") = 0.2, py::arg("alpha") = 0.5, py::arg("train"));

    // Data
    m.def("make_toy_dataset", [] {
        auto ds = make_toy_dataset();
        return py::make_tuple(ds.features, ds.labels);
    });
    m.def("save_toy_dataset", [](const std::filesystem::path& p) { save_dataset_csv(make_toy_dataset(), p); },
          py::arg("path"));
}
