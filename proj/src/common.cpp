#include "flowmig/common.hpp"

#include <openssl/evp.h>

namespace flowmig {

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

std::string seeded_bytes(uint64_t seed, size_t length) {
  std::string out;
  out.resize(length);
  Rng rng(seed);
  size_t i = 0;
  while (i < length) {
    uint64_t v = rng();
    for (int b = 0; b < 8 && i < length; ++b, ++i) {
      out[i] = static_cast<char>('a' + ((v >> (b * 8)) % 26));
    }
  }
  return out;
}

}  // namespace flowmig
