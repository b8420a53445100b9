#pragma once

#include "fedsim/data.hpp"

namespace fedsim {

// Kullback-Leibler divergence sum_y p(y) ln(p(y)/q(y)), natural log, with the
// 0 * ln(0/q) = 0 convention. Returns +infinity (never NaN) when p has mass
// where q has none.
double kl_divergence(const LabelDistribution& p, const LabelDistribution& q);

// Jensen-Shannon divergence between a party's label distribution and the
// global one: 0.5 KL(p||m) + 0.5 KL(p_bar||m) with m the even mixture.
// Always finite; clamped to the theoretical range [0, ln 2] to absorb
// rounding.
double noniid_degree(const LabelDistribution& p, const LabelDistribution& p_bar);

}  // namespace fedsim
