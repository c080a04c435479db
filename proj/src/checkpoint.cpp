#include "archdsl/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace archdsl {

namespace {

constexpr char kMagic[8] = {'A', 'D', 'S', 'L', 'C', 'K', 'P', 'T'};

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params, const nlohmann::json& meta) {
  nlohmann::json header;
  header["version"] = 1;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params.all()) {
    header["tensors"].push_back(
        {{"name", p.name}, {"shape", p.value.shape}, {"offset", offset}, {"count", p.value.size()}});
    offset += p.value.size();
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof kMagic);
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params.all()) {
    for (double v : p.value.data) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  }
  const std::uint64_t len = get_u64(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);
  if (header.at("version").get<int>() != 1) throw std::runtime_error("checkpoint: unsupported version");
  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  std::vector<double> payload;
  while (in.peek() != std::char_traits<char>::eof()) payload.push_back(std::bit_cast<double>(get_u64(in)));
  for (const auto& t : header.at("tensors")) {
    const auto shape = t.at("shape").get<std::vector<int>>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = t.at("count").get<std::size_t>();
    if (offset + count > payload.size()) throw std::runtime_error("checkpoint: payload too short");
    std::vector<double> data(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                             payload.begin() + static_cast<std::ptrdiff_t>(offset + count));
    ck.params.add(t.at("name").get<std::string>(), Tensor(shape, std::move(data)));
  }
  return ck;
}

}  // namespace archdsl
