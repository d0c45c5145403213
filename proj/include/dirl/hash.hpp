#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "dirl/error.hpp"

namespace dirl {

inline std::string sha1_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr)) throw Error("SHA-1 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

/// Same id `git hash-object` assigns to a file with these contents.
inline std::string git_blob_hash(const std::string& contents) {
  return sha1_hex("blob " + std::to_string(contents.size()) + '\0' + contents);
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Hash over a file or every regular file below a directory: blob hashes keyed by relative
/// path, sorted, then hashed again.
inline std::string content_hash(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::exists(root)) throw IoError("cannot hash missing path " + root.string());
  if (fs::is_regular_file(root)) return git_blob_hash(read_file_bytes(root));
  std::vector<std::string> lines;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    lines.push_back(fs::relative(e.path(), root).generic_string() + ' ' + git_blob_hash(read_file_bytes(e.path())));
  }
  std::sort(lines.begin(), lines.end());
  std::string joined;
  for (const auto& l : lines) joined += l + '\n';
  return sha1_hex(joined);
}

}  // namespace dirl
