#include "sdfl/store.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <memory>
#include <mutex>

namespace sdfl::store {

namespace {

using Code = StoreError::Code;

bool is_lower_hex(std::string_view s) {
  for (char ch : s) {
    if (!((ch >= '0' && ch <= '9') || (ch >= 'a' && ch <= 'f'))) return false;
  }
  return true;
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw StoreError(Code::Io, "sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ContentAddress ContentAddress::parse(std::string_view hex) {
  if (hex.size() != 64 || !is_lower_hex(hex)) {
    throw StoreError(Code::InvalidAddress, "not a 64-character lowercase hex digest: " + std::string(hex));
  }
  return ContentAddress(std::string(hex));
}

ContentAddress ContentAddress::of(std::span<const std::uint8_t> bytes) { return ContentAddress(sha256_hex(bytes)); }

ContentStore::ContentStore(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(*root_);
}

std::filesystem::path ContentStore::path_for(const ContentAddress& address) const {
  return *root_ / address.hex().substr(0, 2) / address.hex();
}

ContentAddress ContentStore::put(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw StoreError(Code::EmptyBlob, "refusing to store an empty blob");
  ContentAddress address = ContentAddress::of(bytes);
  std::unique_lock lock(mutex_);
  if (blobs_.contains(address)) return address;
  if (root_) {
    const auto path = path_for(address);
    if (!std::filesystem::exists(path)) {
      std::filesystem::create_directories(path.parent_path());
      auto tmp = path;
      tmp += ".tmp";
      {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw StoreError(Code::Io, "cannot write " + tmp.string());
      }
      std::filesystem::rename(tmp, path);
    }
  }
  blobs_.emplace(address, Blob(bytes.begin(), bytes.end()));
  return address;
}

Blob ContentStore::get(const ContentAddress& address) const {
  {
    std::shared_lock lock(mutex_);
    if (auto it = blobs_.find(address); it != blobs_.end()) return it->second;
  }
  if (root_) {
    const auto path = path_for(address);
    std::ifstream in(path, std::ios::binary);
    if (in) {
      Blob blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      if (ContentAddress::of(blob) != address) throw StoreError(Code::Io, "corrupt blob at " + path.string());
      std::unique_lock lock(mutex_);
      return blobs_.try_emplace(address, std::move(blob)).first->second;
    }
  }
  throw StoreError(Code::NotFound, "no blob " + address.hex());
}

bool ContentStore::contains(const ContentAddress& address) const {
  {
    std::shared_lock lock(mutex_);
    if (blobs_.contains(address)) return true;
  }
  return root_ && std::filesystem::exists(path_for(address));
}

std::size_t ContentStore::size() const {
  std::shared_lock lock(mutex_);
  return blobs_.size();
}

}  // namespace sdfl::store
