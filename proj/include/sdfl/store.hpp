#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sdfl::store {

using Blob = std::vector<std::uint8_t>;

/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

class StoreError : public std::runtime_error {
 public:
  enum class Code { EmptyBlob, NotFound, InvalidAddress, Io };

  StoreError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

/// 64 lowercase hex characters.
class ContentAddress {
 public:
  /// Throws StoreError(InvalidAddress).
  static ContentAddress parse(std::string_view hex);
  static ContentAddress of(std::span<const std::uint8_t> bytes);

  const std::string& hex() const { return hex_; }

  auto operator<=>(const ContentAddress&) const = default;

 private:
  explicit ContentAddress(std::string hex) : hex_(std::move(hex)) {}
  std::string hex_;
};

/// Content-addressed blob store. Writers are serialised; readers run
/// concurrently. With a root directory, blobs are also written to
/// <root>/<first 2 hex>/<64 hex> and looked up there on a cache miss.
class ContentStore {
 public:
  ContentStore() = default;
  explicit ContentStore(std::filesystem::path root);

  ContentStore(const ContentStore&) = delete;
  ContentStore& operator=(const ContentStore&) = delete;

  ContentAddress put(std::span<const std::uint8_t> bytes);

  /// Throws StoreError(NotFound).
  Blob get(const ContentAddress& address) const;

  bool contains(const ContentAddress& address) const;
  std::size_t size() const;
  const std::optional<std::filesystem::path>& root() const { return root_; }

 private:
  std::filesystem::path path_for(const ContentAddress& address) const;

  std::optional<std::filesystem::path> root_;
  mutable std::shared_mutex mutex_;
  mutable std::map<ContentAddress, Blob> blobs_;
};

}  // namespace sdfl::store
