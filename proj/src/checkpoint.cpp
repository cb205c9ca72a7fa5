#include "salvit/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace salvit::nc {

namespace {

void put_f32_le(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  unsigned char b[4] = {static_cast<unsigned char>(bits & 0xff),
                        static_cast<unsigned char>((bits >> 8) & 0xff),
                        static_cast<unsigned char>((bits >> 16) & 0xff),
                        static_cast<unsigned char>((bits >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

float get_f32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated payload");
  const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                             (static_cast<std::uint32_t>(b[1]) << 8) |
                             (static_cast<std::uint32_t>(b[2]) << 16) |
                             (static_cast<std::uint32_t>(b[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const std::map<std::string, std::string>& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os << "SALVIT-CKPT 1\n";
  for (const auto& [k, v] : meta) os << "meta " << k << " " << v << "\n";
  for (const auto& [name, t] : params.all()) {
    os << "tensor " << name << " " << t.rank();
    for (int i = 0; i < t.rank(); ++i) os << " " << t.dim(i);
    os << " f32\n";
  }
  os << "END\n";
  for (const auto& [name, t] : params.all()) {
    (void)name;
    for (std::size_t i = 0; i < t.size(); ++i) put_f32_le(os, static_cast<float>(t[i]));
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(is, line) || line != "SALVIT-CKPT 1")
    throw std::runtime_error("bad checkpoint header in " + path);

  LoadedCheckpoint out;
  struct Entry {
    std::string name;
    std::vector<int> shape;
  };
  std::vector<Entry> manifest;
  while (std::getline(is, line)) {
    if (line == "END") break;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      out.meta[key] = value;
    } else if (tag == "tensor") {
      Entry e;
      int rank = 0;
      ls >> e.name >> rank;
      for (int i = 0; i < rank; ++i) {
        int d = 0;
        ls >> d;
        e.shape.push_back(d);
      }
      std::string dtype;
      ls >> dtype;
      if (!ls || dtype != "f32")
        throw std::runtime_error("bad tensor manifest line: " + line);
      manifest.push_back(std::move(e));
    } else {
      throw std::runtime_error("unknown manifest tag: " + tag);
    }
  }
  for (const Entry& e : manifest) {
    Tensor t(e.shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(get_f32_le(is));
    out.params.create(e.name, std::move(t));
  }
  return out;
}

}  // namespace salvit::nc
