#include "regionbag/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace regionbag {

using nlohmann::json;

namespace {
constexpr char kMagic[6] = {'R', 'B', 'C', 'K', '1', '\n'};

void write_u64(std::ostream& os, uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, 8);
}

uint64_t read_u64(std::istream& is) {
  char buf[8];
  is.read(buf, 8);
  if (is.gcount() != 8) throw std::runtime_error("checkpoint: truncated length");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[i])) << (8 * i);
  return v;
}

json read_header(std::istream& is) {
  char magic[6];
  is.read(magic, 6);
  if (is.gcount() != 6 || std::memcmp(magic, kMagic, 6) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  const uint64_t hlen = read_u64(is);
  std::string htext(hlen, '\0');
  is.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (is.gcount() != static_cast<std::streamsize>(hlen))
    throw std::runtime_error("checkpoint: truncated header");
  return json::parse(htext);
}
}  // namespace

void save_checkpoint(const std::string& path, const json& config,
                     const ad::ParamStore& params) {
  json header;
  header["config"] = config;
  json tensors = json::array();
  for (const auto& p : params.all()) {
    tensors.push_back({{"name", p->name},
                       {"rows", p->value.rows()},
                       {"cols", p->value.cols()}});
  }
  header["tensors"] = std::move(tensors);
  const std::string htext = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  f.write(kMagic, 6);
  write_u64(f, htext.size());
  f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& p : params.all()) {
    for (int r = 0; r < p->value.rows(); ++r) {
      for (int c = 0; c < p->value.cols(); ++c) {
        const double v = p->value(r, c);
        f.write(reinterpret_cast<const char*>(&v), sizeof(double));
      }
    }
  }
  if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

json read_checkpoint_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  return read_header(f)["config"];
}

void load_checkpoint_values(const std::string& path, ad::ParamStore& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  const json header = read_header(f);
  for (const auto& jt : header["tensors"]) {
    const std::string name = jt["name"].get<std::string>();
    const int rows = jt["rows"].get<int>();
    const int cols = jt["cols"].get<int>();
    ad::Param* p = params.find(name);
    if (!p) throw std::runtime_error("checkpoint: unexpected tensor: " + name);
    if (p->value.rows() != rows || p->value.cols() != cols)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        double v = 0;
        f.read(reinterpret_cast<char*>(&v), sizeof(double));
        if (f.gcount() != sizeof(double))
          throw std::runtime_error("checkpoint: truncated tensor data");
        p->value(r, c) = v;
      }
    }
  }
}

}  // namespace regionbag
