#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "qdfl/commands.hpp"
#include "qdfl/directional.hpp"
#include "qdfl/io.hpp"
#include "qdfl/network.hpp"
#include "qdfl/reid.hpp"

namespace py = pybind11;
using namespace qdfl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor4 to_tensor4(const Array& a) {
    if (a.ndim() != 4) throw ShapeError("expected a 4-d (n, h, w, c) array");
    const Shape s{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                  static_cast<std::size_t>(a.shape(2)), static_cast<std::size_t>(a.shape(3))};
    return Tensor4(s, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor4& t) {
    const Shape& s = t.shape();
    Array out({s.n, s.h, s.w, s.c});
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

Array to_array(const std::vector<double>& v) {
    Array out(static_cast<py::ssize_t>(v.size()));
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

Direction parse_direction(const std::string& s) {
    if (s.size() != 1) throw ConfigError("direction must be one of H, V, D, A");
    return direction_from_letter(s[0]);
}

py::dict report_dict(const EvalReport& r) {
    py::dict d;
    d["map"] = r.map;
    d["cmc"] = r.cmc;
    d["n_queries_used"] = r.n_queries_used;
    d["n_skipped"] = r.n_skipped;
    d["skipped_queries"] = r.skipped_queries;
    d["per_query_ap"] = r.per_query_ap;
    d["summary"] = summary_line(r);
    return d;
}

}  // namespace

PYBIND11_MODULE(qdfl, m) {
    m.doc() = "Quadruple directional deep learning features for vehicle re-identification";

    // Base first: pybind tries the most recently registered translator first.
    const auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ShapeError>(m, "ShapeError", base);
    py::register_exception<FormatError>(m, "FormatError", base);
    py::register_exception<ConfigError>(m, "ConfigError", base);
    py::register_exception<DataError>(m, "DataError", base);
    py::register_exception<ProtocolError>(m, "ProtocolError", base);
    py::register_exception<DivergenceError>(m, "DivergenceError", base);

    m.def(
        "directional_pool",
        [](const Array& x, const std::string& dir) { return to_array(directional_pool(to_tensor4(x), parse_direction(dir)).values); },
        py::arg("x"), py::arg("direction"),
        "Mean over the horizontal, vertical, diagonal or anti-diagonal lines of a square (n, d, d, c) map. "
        "Returns (n, L, 1, c).");
    m.def(
        "directional_length", [](const std::string& dir, std::size_t d) { return directional_length(parse_direction(dir), d); },
        py::arg("direction"), py::arg("d"));
    m.def(
        "spatial_norm",
        [](const Array& p, std::size_t window) {
            DirectionalMap in;
            in.values = to_tensor4(p);
            in.source_d = in.values.shape().h;
            return to_array(spatial_norm_forward(in, window).values);
        },
        py::arg("p"), py::arg("window") = 4, "Spatial normalisation of an (n, L, 1, c) pooled map.");

    m.def(
        "table1_shapes",
        []() {
            const NetworkSpec spec = table1_profile();
            Backbone backbone(spec);
            std::vector<ShapeTrace> trace;
            backbone.forward(Tensor4(Shape{1, 128, 128, 3}), Mode::eval, &trace);
            std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
            for (const auto& t : trace) out.push_back({t.name, {t.shape.n, t.shape.h, t.shape.w, t.shape.c}});
            return out;
        },
        "Backbone output shapes for a 128x128x3 input.");
    m.def(
        "descriptor_length",
        [](const std::string& profile, const std::string& branches, std::size_t seed_channels, std::size_t input_size) {
            NetworkSpec spec = profile == "table1" ? table1_profile() : toy_profile(seed_channels, input_size);
            spec.branches = BranchSet::parse(branches);
            return spec.descriptor_length();
        },
        py::arg("profile") = "table1", py::arg("branches") = "HVDA", py::arg("seed_channels") = 8,
        py::arg("input_size") = 32);

    m.def(
        "average_precision",
        [](const std::vector<bool>& hits) {
            const std::unique_ptr<bool[]> flat(new bool[hits.size()]);
            std::copy(hits.begin(), hits.end(), flat.get());
            return average_precision(std::span<const bool>(flat.get(), hits.size()));
        },
        py::arg("hits"), "Hit-based AP over a ranked relevance list; None when nothing is relevant.");
    m.def(
        "evaluate",
        [](const std::filesystem::path& features, const std::filesystem::path& manifest, const std::string& protocol) {
            return report_dict(evaluate(load_manifest(manifest), load_descriptors(features), protocol_from_name(protocol)));
        },
        py::arg("features"), py::arg("manifest"), py::arg("protocol") = "plain");
    m.def(
        "evaluate_table",
        [](const std::filesystem::path& manifest, const std::map<std::string, std::vector<double>>& table,
           const std::string& protocol) {
            return report_dict(evaluate(load_manifest(manifest), table, protocol_from_name(protocol)));
        },
        py::arg("manifest"), py::arg("descriptors"), py::arg("protocol") = "plain",
        "Evaluate in-memory descriptors keyed by sample_id.");

    m.def(
        "synth",
        [](std::size_t ids, std::size_t per_id, std::size_t size, std::uint64_t seed, const std::filesystem::path& out) {
            std::ostringstream log;
            return cmd_synth(SynthOptions{ids, per_id, size, seed}, out, log).records.size();
        },
        py::arg("ids"), py::arg("per_id"), py::arg("size"), py::arg("seed"), py::arg("out"),
        "Write a synthetic dataset; returns the number of records.");
    m.def(
        "train",
        [](const std::filesystem::path& config) {
            std::ostringstream log;
            py::gil_scoped_release release;
            return cmd_train(config, log).final_loss;
        },
        py::arg("config"), "Train from a config file; returns the final loss per branch.");
    m.def(
        "extract",
        [](const std::filesystem::path& model, const std::filesystem::path& manifest, const std::filesystem::path& out) {
            std::ostringstream log;
            const ExtractSummary s = cmd_extract(model, manifest, out, log);
            return py::make_tuple(s.succeeded, s.failed);
        },
        py::arg("model"), py::arg("manifest"), py::arg("out"));
    m.def(
        "load_descriptors",
        [](const std::filesystem::path& features) {
            py::dict d;
            for (const auto& [id, v] : load_descriptors(features)) d[py::str(id)] = to_array(v);
            return d;
        },
        py::arg("features"));
    m.def(
        "gradcheck",
        [](std::optional<double> tolerance, std::size_t probes, std::uint64_t seed) {
            std::ostringstream out;
            const bool ok = cmd_gradcheck("toy", tolerance, probes, seed, out);
            return py::make_tuple(ok, out.str());
        },
        py::arg("tolerance") = py::none(), py::arg("probes") = 200, py::arg("seed") = 0,
        "Run the gradient suite; returns (passed, report text).");

    py::class_<QdModel>(m, "Model")
        .def_static(
            "load", [](const std::filesystem::path& path) { return load_model(path).model; }, py::arg("path"))
        .def_property_readonly("branches", [](const QdModel& q) { return q.spec.branches.str(); })
        .def_property_readonly("input_size", [](const QdModel& q) { return q.spec.input_size; })
        .def_property_readonly("descriptor_length", [](const QdModel& q) { return q.spec.descriptor_length(); })
        .def(
            "extract",
            [](QdModel& q, const Array& images) {
                const auto descs = q.extract(to_tensor4(images));
                const std::size_t dim = q.spec.descriptor_length();
                Array out({descs.size(), dim});
                for (std::size_t i = 0; i < descs.size(); ++i)
                    std::copy(descs[i].values.begin(), descs[i].values.end(), out.mutable_data() + i * dim);
                return out;
            },
            py::arg("images"), "Descriptors for an (n, s, s, 3) batch in [0, 1]; returns (n, D).");
}
