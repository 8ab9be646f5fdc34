#include "esqa/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "esqa/error.hpp"

namespace esqa {

namespace {

void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const std::string& in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw DataError("tensor container truncated");
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 8;
  return x;
}

}  // namespace

void write_tensor_container(const std::filesystem::path& path, const ParamList& tensors) {
  std::string out;
  for (const auto& [name, t] : tensors) {
    put_u64(out, name.size());
    out += name;
    put_u64(out, t.rank());
    for (auto e : t.shape()) put_u64(out, e);
    for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  write_file_atomic(path, out);
}

ParamList read_tensor_container(const std::filesystem::path& path) {
  const std::string in = read_file(path);
  ParamList result;
  std::size_t pos = 0;
  while (pos < in.size()) {
    const auto len = get_u64(in, pos);
    if (pos + len > in.size()) throw DataError("tensor container truncated in name");
    std::string name = in.substr(pos, len);
    pos += len;
    const auto rank = get_u64(in, pos);
    if (rank > 8) throw DataError("tensor container: implausible rank for " + name);
    Shape shape(rank);
    for (auto& e : shape) e = get_u64(in, pos);
    std::vector<double> data(shape_size(shape));
    for (auto& v : data) v = std::bit_cast<double>(get_u64(in, pos));
    result.push_back({std::move(name), Tensor::from(std::move(shape), std::move(data))});
  }
  return result;
}

void load_into(const ParamList& params, const ParamList& stored) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& s : stored) by_name[s.name] = &s.tensor;
  for (const auto& [name, t] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint is missing tensor " + name);
    if (it->second->shape() != t.shape()) {
      throw DataError("checkpoint tensor " + name + " has shape " + shape_string(it->second->shape()) +
                      ", expected " + shape_string(t.shape()));
    }
    auto dst = Tensor(t).data_mut();
    const auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

namespace {
std::string hex64(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}
}  // namespace

std::string hash_params(const ParamList& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params) {
    for (char c : p.name) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    for (double v : p.tensor.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xFF;
        h *= 1099511628211ULL;
      }
    }
  }
  return hex64(h);
}

std::string hash_string(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return hex64(h);
}

}  // namespace esqa
