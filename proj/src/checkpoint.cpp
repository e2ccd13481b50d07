#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "ilcot/error.hpp"
#include "ilcot/net.hpp"

namespace ilcot {

namespace {

constexpr std::array<char, 8> kMagic = {'M', 'U', 'R', 'E', 'K', 'I', 'T', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U get(std::istream& is, const std::filesystem::path& path) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw Error(Errc::IoError, "truncated checkpoint " + path.string());
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Params<float>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::IoError, "cannot write " + path.string());
  const auto& c = params.config;
  os.write(kMagic.data(), kMagic.size());
  for (int v : {c.d, c.layers, c.heads, c.vocab, kPatchSize, kPatchSize, kChannels}) put<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  put<std::uint64_t>(os, params.count());
  for (const auto& t : params.tensors) os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!os) throw Error(Errc::IoError, "write failed for " + path.string());
}

Params<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::IoError, "cannot open " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size())) throw Error(Errc::IoError, "truncated checkpoint " + path.string());
  if (magic != kMagic) throw Error(Errc::CheckpointVersionMismatch, "bad magic in " + path.string());
  std::array<std::uint32_t, 7> h{};
  for (auto& v : h) v = get<std::uint32_t>(is, path);
  if (h[4] != kPatchSize || h[5] != kPatchSize || h[6] != kChannels || h[3] != kVocabSize)
    throw Error(Errc::CheckpointVersionMismatch, "patch, channel or vocabulary dims differ from this build");
  ModelConfig cfg;
  cfg.d = static_cast<int>(h[0]);
  cfg.layers = static_cast<int>(h[1]);
  cfg.heads = static_cast<int>(h[2]);
  cfg.vocab = static_cast<int>(h[3]);
  if (cfg.d <= 0 || cfg.d > 4096 || cfg.layers > 64 || cfg.heads <= 0)
    throw Error(Errc::CheckpointVersionMismatch, "implausible model dims in " + path.string());
  auto params = Params<float>::zeros(cfg);
  const auto count = get<std::uint64_t>(is, path);
  if (count != params.count()) throw Error(Errc::CheckpointVersionMismatch, "parameter count mismatch");
  for (auto& t : params.tensors)
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float))))
      throw Error(Errc::IoError, "truncated checkpoint " + path.string());
  if (is.peek() != std::char_traits<char>::eof()) throw Error(Errc::IoError, "trailing bytes in " + path.string());
  return params;
}

}  // namespace ilcot
