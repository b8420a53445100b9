#include "fedsim/divergence.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace fedsim {

double kl_divergence(const LabelDistribution& p, const LabelDistribution& q) {
  if (p.probs.size() != q.probs.size())
    throw std::invalid_argument("kl_divergence: distribution lengths differ");
  double sum = 0.0;
  for (std::size_t y = 0; y < p.probs.size(); ++y) {
    double py = p.probs[y];
    if (py == 0.0) continue;
    if (q.probs[y] == 0.0) return std::numeric_limits<double>::infinity();
    sum += py * std::log(py / q.probs[y]);
  }
  return sum;
}

double noniid_degree(const LabelDistribution& p, const LabelDistribution& p_bar) {
  if (p.probs.size() != p_bar.probs.size())
    throw std::invalid_argument("noniid_degree: distribution lengths differ");
  LabelDistribution m;
  m.probs.resize(p.probs.size());
  for (std::size_t y = 0; y < p.probs.size(); ++y)
    m.probs[y] = 0.5 * (p.probs[y] + p_bar.probs[y]);
  double js = 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(p_bar, m);
  const double ln2 = std::log(2.0);
  if (js < 0.0) js = 0.0;
  if (js > ln2) js = ln2;
  return js;
}

}  // namespace fedsim
