#include "salvit/metrics.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace salvit::ep {

bool pck_correct(double px, double py, double gx, double gy, const Box& box, double tau) {
  if (box.width() <= 0.0 || box.height() <= 0.0)
    throw std::invalid_argument("pck: object box must have positive extent");
  const double d = std::hypot(px - gx, py - gy);
  return d <= tau * std::max(box.width(), box.height());
}

double pck_score(const std::vector<bool>& correct) {
  if (correct.empty()) return 0.0;
  std::size_t ok = 0;
  for (bool c : correct) ok += c ? 1 : 0;
  return 100.0 * static_cast<double>(ok) / static_cast<double>(correct.size());
}

double normalized_error(double px, double py, double gx, double gy, double img_w, double img_h) {
  return std::hypot(px - gx, py - gy) / std::max(img_w, img_h);
}

double harmonic_mean(double a, double b) {
  if (a + b <= 0.0) return 0.0;
  return 2.0 * a * b / (a + b);
}

double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double stddev_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double mu = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

CsvLogger::CsvLogger(const std::string& path, const std::string& header) : path_(path) {
  std::ifstream probe(path_);
  if (probe.good()) {
    std::string first;
    std::getline(probe, first);
    if (first != header)
      throw std::runtime_error("csv schema mismatch in " + path_ + ": have '" + first +
                               "', want '" + header + "'");
    return;
  }
  std::ofstream os(path_);
  if (!os) throw std::runtime_error("cannot create csv: " + path_);
  os << header << "\n";
}

void CsvLogger::append(const std::string& row) {
  std::ofstream os(path_, std::ios::app);
  if (!os) throw std::runtime_error("cannot append to csv: " + path_);
  os << row << "\n";
}

}  // namespace salvit::ep
