#pragma once

#include <string>
#include <vector>

#include "salvit/data.hpp"

namespace salvit::ep {

/// PCK correctness: distance to ground truth <= tau * max(box w, box h).
bool pck_correct(double px, double py, double gx, double gy, const Box& box, double tau = 0.1);

/// Percentage of correct flags, in [0, 100]. Empty input scores 0.
double pck_score(const std::vector<bool>& correct);

/// Normalized error: distance / max(image w, image h).
double normalized_error(double px, double py, double gx, double gy, double img_w, double img_h);

/// 2ab / (a + b); zero when a + b == 0.
double harmonic_mean(double a, double b);

double mean_of(const std::vector<double>& xs);
double stddev_of(const std::vector<double>& xs);  // sample (n-1) when n > 1

/// Append-only CSV with a fixed header; the header is written when the file
/// is created and verified otherwise.
class CsvLogger {
 public:
  CsvLogger(const std::string& path, const std::string& header);
  void append(const std::string& row);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

}  // namespace salvit::ep
