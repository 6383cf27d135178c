#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dcr/engine.hpp"
#include "dcr/model.hpp"
#include "dcr/schedules.hpp"
#include "dcr/tape.hpp"
#include "dcr/theory.hpp"
#include "dcr/train.hpp"

namespace py = pybind11;

namespace {

dcr::Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    dcr::Shape shape;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(a.shape(i));
    std::vector<double> data(a.data(), a.data() + a.size());
    return dcr::Tensor::from(std::move(shape), std::move(data));
}

py::array_t<double> array_from_tensor(const dcr::Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<double> out(shape);
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
}

}  // namespace

PYBIND11_MODULE(_dcr, m) {
    m.doc() = "deterministic continuous replacement lab: core operations";

    py::class_<dcr::GateSchedule>(m, "GateSchedule")
        .def_readonly("name", &dcr::GateSchedule::name)
        .def("value", &dcr::GateSchedule::value);
    m.def("parse_schedule", &dcr::parse_schedule, "schedule from its config name");
    m.def("dcr_aggr20", &dcr::dcr_aggr20);
    m.def("theseus_aggr20", &dcr::theseus_aggr20);

    m.def("draw_bernoulli_gate", [](double p, uint64_t seed) {
        dcr::Rng rng(seed);
        return dcr::draw_bernoulli_gate(p, rng);
    });
    m.def("draw_gumbel_gate", [](double p, double tau, uint64_t seed) {
        dcr::Rng rng(seed);
        return dcr::draw_gumbel_gate(p, tau, rng);
    });

    m.def("theseus_variance_closed_form",
          [](double p, const std::vector<double>& mean_a, double var_a) {
              return dcr::theseus_variance_closed_form(p, mean_a, var_a);
          });
    m.def("soft_gate_variance_closed_form", &dcr::soft_gate_variance_closed_form);

    m.def("layer_norm", [](const py::array_t<double>& x, const py::array_t<double>& gamma,
                           const py::array_t<double>& beta, double eps) {
        return array_from_tensor(dcr::kernels::layer_norm(tensor_from_array(x), tensor_from_array(gamma),
                                                          tensor_from_array(beta), eps, nullptr));
    });
    m.def("softmax_rows", [](const py::array_t<double>& x) {
        return array_from_tensor(dcr::kernels::softmax_rows(tensor_from_array(x)));
    });
    m.def("gelu", [](const py::array_t<double>& x) {
        return array_from_tensor(dcr::kernels::gelu(tensor_from_array(x)));
    });
    m.def("kaiming_init", [](const std::vector<int64_t>& shape, int64_t fan_in, uint64_t seed) {
        dcr::Rng rng(seed);
        return array_from_tensor(dcr::kaiming_init(dcr::Shape(shape.begin(), shape.end()), fan_in, rng));
    });
    m.def("interface_cosine_similarity",
          [](const py::array_t<double>& t, const py::array_t<double>& s) {
              return dcr::interface_cosine_similarity(tensor_from_array(t), tensor_from_array(s));
          });
    m.def("kd_soft_target_loss",
          [](const py::array_t<double>& student, const py::array_t<double>& teacher, double temp) {
              return dcr::kd_soft_target_loss(tensor_from_array(student), tensor_from_array(teacher), temp);
          });

    // gradient check for the layer_norm -> sum composite, as a smoke surface
    m.def("finite_diff_layer_norm", [](const py::array_t<double>& x, double h) {
        const dcr::Tensor xt = tensor_from_array(x);
        const int64_t d = xt.shape.back();
        return dcr::finite_diff_check(
            [d](dcr::Tape& tape, dcr::Var v) {
                dcr::Tensor gamma(dcr::Shape{d}, 1.0);
                dcr::Tensor beta(dcr::Shape{d}, 0.0);
                const dcr::Var g = tape.constant(gamma);
                const dcr::Var b = tape.constant(beta);
                return tape.mse(tape.layer_norm(v, g, b, 1e-5), tape.constant(dcr::Tensor(tape.val(v).shape, 0.5)));
            },
            xt, h);
    });
}
