#pragma once

#include <openssl/evp.h>

#include <string>
#include <string_view>

namespace gridpipe {

inline std::string to_hex(const unsigned char* data, size_t len) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (size_t i = 0; i < len; ++i) {
    out.push_back(digits[data[i] >> 4]);
    out.push_back(digits[data[i] & 0xf]);
  }
  return out;
}

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
  return to_hex(md, len);
}

inline std::string short_digest(std::string_view bytes, size_t hex_chars = 12) {
  return sha256_hex(bytes).substr(0, hex_chars);
}

}  // namespace gridpipe
