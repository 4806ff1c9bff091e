#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fedcspc/autodiff.hpp"
#include "fedcspc/model.hpp"
#include "fedcspc/tensor.hpp"

namespace fedcspc {

inline constexpr double kFiniteDifferenceStep = 1e-5;

// ||a - b|| / max(||a||, ||b||, floor)
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8);

// Scalar loss built from leaf variables, one per input tensor.
using TensorLoss = std::function<ad::Var(std::span<const ad::Var>)>;
// Scalar loss built from a bound model.
using ModelLoss = std::function<ad::Var(const BoundModel&)>;

// Reverse-mode gradient against central differences over every input element.
double check_tensor_gradient(const TensorLoss& loss, const std::vector<Tensor>& inputs,
                             double step = kFiniteDifferenceStep);
// Same, over every parameter of the trainable partitions.
double check_model_gradient(const ModelLoss& loss, const ModelParams& params, std::span<const Partition> trainable,
                            double step = kFiniteDifferenceStep);

struct GradcheckResult {
    std::string name;
    std::size_t instances = 0;
    double max_error = 0.0;
    double tolerance = 0.0;
    bool passed() const noexcept { return max_error < tolerance; }
};

// Every differentiable loss of the method plus the basic tensor operations, each
// on `instances` random cases.
std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed = 7, std::size_t instances = 20);

void write_gradcheck_report(std::ostream& out, const std::vector<GradcheckResult>& results);

}  // namespace fedcspc
