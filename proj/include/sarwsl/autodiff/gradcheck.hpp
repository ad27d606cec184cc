#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "sarwsl/autodiff/tape.hpp"

namespace sarwsl::ad {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::size_t excluded = 0; // elements sitting on a kink (relu zero, pool tie)
    // Location and values of the worst element.
    std::size_t worst_input = 0;
    std::size_t worst_element = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

enum class Precision { f32, f64 };

struct GradCheckOptions {
    Precision analytic = Precision::f32;
    double epsilon = 1e-3;
    // Kink detection: for a smooth function the second differences at steps
    // h and h/2 scale by exactly 4 (up to O(h^4)); a relu zero or pool tie
    // inside the stencil breaks that. Elements whose mismatch exceeds
    // kink_tolerance * h * max(|gradient|, 1e-3) are excluded.
    double kink_tolerance = 1e-7;
};

/// Compares reverse-mode gradients of a scalar function against finite
/// differences. `fn` is generic over the scalar type:
///   template <class U> Var fn(Tape<U>&, const std::vector<Var>& inputs)
/// Analytic gradients use the requested precision. The numeric reference is
/// evaluated in double as a Richardson-extrapolated central difference
/// (steps h and h/2), so it is limited neither by float round-off nor by the
/// O(h^2) truncation of a single central difference.
/// Error per element is |a - n| / max(|a|, |n|, 1e-8); the maximum is returned.
template <typename Fn>
GradCheckResult finite_diff_check(Fn&& fn, const std::vector<Tensor<double>>& inputs,
                                  const GradCheckOptions& options = {})
{
    const auto analytic = [&]<typename U>(U) {
        Tape<U> tape;
        std::vector<Var> vars;
        for (const auto& in : inputs)
            vars.push_back(tape.variable(in.template cast<U>()));
        const Var out = fn(tape, vars);
        if (tape.value(out).size() != 1)
            throw std::invalid_argument("finite_diff_check: function output is not scalar");
        tape.backward(out);
        std::vector<Tensor<double>> grads;
        for (Var v : vars)
            grads.push_back(tape.grad(v).template cast<double>());
        return grads;
    };
    const std::vector<Tensor<double>> grads =
        options.analytic == Precision::f32 ? analytic(float{}) : analytic(double{});

    // The reference is taken at the point the analytic pass actually saw:
    // in f32 mode that is the inputs rounded to float.
    std::vector<Tensor<double>> point = inputs;
    if (options.analytic == Precision::f32)
        for (auto& t : point)
            t = t.template cast<float>().template cast<double>();
    const auto evaluate = [&]() {
        Tape<double> tape;
        std::vector<Var> vars;
        for (const auto& in : point)
            vars.push_back(tape.constant(in));
        const Var out = fn(tape, vars);
        if (tape.value(out).size() != 1)
            throw std::invalid_argument("finite_diff_check: function output is not scalar");
        return tape.value(out)[0];
    };

    GradCheckResult result;
    const double f0 = evaluate();
    const double h = options.epsilon;
    for (std::size_t i = 0; i < point.size(); ++i)
        for (std::size_t j = 0; j < point[i].size(); ++j) {
            const double saved = point[i][j];
            const auto at = [&](double offset) {
                point[i][j] = saved + offset;
                const double f = evaluate();
                point[i][j] = saved;
                return f;
            };
            const double fp = at(h), fm = at(-h), fp2 = at(h / 2), fm2 = at(-h / 2);

            const double wide = (fp - fm) / (2.0 * h), narrow = (fp2 - fm2) / h;
            const double numeric = (4.0 * narrow - wide) / 3.0;
            const double curvature_mismatch = std::abs((fp + fm - 2.0 * f0) - 4.0 * (fp2 + fm2 - 2.0 * f0));
            const double roundoff = 1e3 * std::numeric_limits<double>::epsilon() * std::abs(f0);
            if (curvature_mismatch > options.kink_tolerance * h * std::max(std::abs(numeric), 1e-3) + roundoff) {
                ++result.excluded;
                continue;
            }
            const double a = grads[i][j];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            if (err > result.max_relative_error || result.checked == 0) {
                result.max_relative_error = err;
                result.worst_input = i;
                result.worst_element = j;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
            ++result.checked;
        }
    return result;
}

} // namespace sarwsl::ad
