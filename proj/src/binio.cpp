#include "mindvis/binio.hpp"

#include <filesystem>
#include <fstream>
#include <iterator>

namespace mindvis::binio {

void Writer::str16(const std::string& s) {
  if (s.size() > 0xFFFF) throw InvalidArgument("string too long for u16 length prefix");
  put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
  bytes(s.data(), s.size());
}

void Writer::str32(const std::string& s) {
  put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

std::string Reader::str16() {
  const auto n = get<std::uint16_t>();
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}

std::string Reader::str32() {
  const auto n = get<std::uint32_t>();
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<unsigned char>& data) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("short write to " + path);
}

}  // namespace mindvis::binio
