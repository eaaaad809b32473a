#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <string>

#include "kvdistill/config_io.hpp"
#include "kvdistill/embedbank.hpp"
#include "kvdistill/errors.hpp"
#include "kvdistill/student.hpp"
#include "kvdistill/trainer.hpp"

namespace py = pybind11;
using namespace kvdistill;

namespace {

py::array_t<double> to_array(const Matrix& m) {
    py::array_t<double> out({m.rows(), m.cols()});
    auto view = out.mutable_unchecked<2>();
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) view(r, c) = m(r, c);
    return out;
}

Matrix from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw py::value_error("expected a 2-d array");
    Matrix m(a.shape(0), a.shape(1));
    auto view = a.unchecked<2>();
    for (py::ssize_t r = 0; r < a.shape(0); ++r)
        for (py::ssize_t c = 0; c < a.shape(1); ++c) m(r, c) = view(r, c);
    return m;
}

TrainConfig config_from(const py::dict& overrides) {
    TrainConfig c;
    if (!overrides.empty()) {
        const std::string text = py::module_::import("json").attr("dumps")(overrides).cast<std::string>();
        apply_json(c, Json::parse(text));
    }
    return c;
}

py::dict to_dict(const Json& j) {
    return py::module_::import("json").attr("loads")(j.dump()).cast<py::dict>();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Graph-teacher distillation into a training-free cache adapter";

    py::register_exception<Error>(m, "KvdistillError", PyExc_RuntimeError);

    py::class_<SyntheticSpec>(m, "SyntheticSpec")
        .def(py::init<>())
        .def_readwrite("classes", &SyntheticSpec::classes)
        .def_readwrite("dim", &SyntheticSpec::dim)
        .def_readwrite("patches", &SyntheticSpec::patches)
        .def_readwrite("foreground", &SyntheticSpec::foreground)
        .def_readwrite("sigma_foreground", &SyntheticSpec::sigma_foreground)
        .def_readwrite("sigma_background", &SyntheticSpec::sigma_background)
        .def_readwrite("sigma_text", &SyntheticSpec::sigma_text)
        .def_readwrite("images_per_class", &SyntheticSpec::images_per_class)
        .def_readwrite("seed", &SyntheticSpec::seed);

    py::class_<EmbeddingBank>(m, "EmbeddingBank")
        .def_readonly("dim", &EmbeddingBank::dim)
        .def_readonly("num_classes", &EmbeddingBank::num_classes)
        .def_readonly("patches_per_image", &EmbeddingBank::patches_per_image)
        .def_property_readonly("num_images", [](const EmbeddingBank& b) { return b.images.size(); })
        .def_property_readonly("prompts", [](const EmbeddingBank& b) { return to_array(b.prompts); })
        .def("labels", [](const EmbeddingBank& b) {
            std::vector<std::uint32_t> out;
            for (const auto& im : b.images) out.push_back(im.label);
            return out;
        })
        .def("features", [](const EmbeddingBank& b, std::size_t i) { return to_array(b.images.at(i).features); })
        .def("foreground", [](const EmbeddingBank& b, std::size_t i) { return b.images.at(i).foreground; })
        .def("__eq__", [](const EmbeddingBank& a, const EmbeddingBank& b) { return a == b; });

    py::class_<Episode>(m, "Episode")
        .def_readonly("shots", &Episode::shots)
        .def_readonly("supports", &Episode::supports)
        .def_readonly("queries", &Episode::queries)
        .def_readonly("validation", &Episode::validation);

    py::class_<CacheModel>(m, "Student")
        .def_property_readonly("keys", [](const CacheModel& s) { return to_array(s.keys); })
        .def_property_readonly("values", [](const CacheModel& s) { return to_array(s.values); })
        .def_property_readonly("adapter", [](const CacheModel& s) { return to_array(s.adapter); })
        .def_readwrite("alpha", &CacheModel::alpha)
        .def_readwrite("beta", &CacheModel::beta)
        .def_readonly("tau", &CacheModel::tau)
        .def("logits", [](const CacheModel& s, const py::array_t<double>& queries, const EmbeddingBank& bank) {
            return to_array(test_logits_batch(from_array(queries), s, bank.prompts));
        }, py::arg("queries"), py::arg("bank"))
        .def("save", [](const CacheModel& s, const std::filesystem::path& p) { save_student(s, p); })
        .def("__eq__", [](const CacheModel& a, const CacheModel& b) { return a == b; });

    m.def("gen_synthetic", &gen_synthetic, py::arg("spec") = SyntheticSpec{});
    m.def("save_bank", &save_bank, py::arg("bank"), py::arg("path"));
    m.def("load_bank", &load_bank, py::arg("path"));
    m.def("sample_episode", &sample_episode, py::arg("bank"), py::arg("shots"), py::arg("seed") = 0);
    m.def("load_student", &load_student, py::arg("path"));
    m.def("student_file_size", &student_file_size);
    m.def("evaluate", &evaluate, py::arg("student"), py::arg("bank"), py::arg("episode"));

    m.def("default_config", [] { return to_dict(to_json(TrainConfig{})); });
    m.def("train", [](const EmbeddingBank& bank, const Episode& episode, const py::dict& config) {
        const TrainConfig c = config_from(config);
        TrainResult r;
        {
            py::gil_scoped_release release;
            r = train(bank, episode, c);
        }
        py::dict metrics = to_dict(to_json(r.metrics));
        metrics["query_logits"] = to_array(r.metrics.query_logits);
        py::list history;
        for (const EpochRecord& e : r.metrics.epochs) {
            history.append(py::dict(py::arg("epoch") = e.epoch, py::arg("loss") = e.loss, py::arg("ce") = e.ce,
                                    py::arg("focal") = e.focal, py::arg("lr") = e.lr));
        }
        metrics["history"] = history;
        return py::make_tuple(r.model, metrics);
    }, py::arg("bank"), py::arg("episode"), py::arg("config") = py::dict());

    m.def("ablation_arms", [] {
        std::vector<std::pair<std::string, std::string>> out;
        for (const Arm& a : ablation_arms()) out.emplace_back(a.name, a.description);
        return out;
    });
}
