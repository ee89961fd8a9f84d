#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace imtk {

inline constexpr std::string_view kDefaultHashAlgorithm = "sha256";

/// Hex length of a digest for a supported algorithm, 0 if unsupported.
std::size_t digest_hex_length(std::string_view algorithm) noexcept;

bool is_lower_hex(std::string_view text) noexcept;

std::string to_hex(std::span<const std::uint8_t> bytes);

/// Incremental hasher over an OpenSSL message digest.
class Hasher {
public:
  explicit Hasher(std::string_view algorithm = kDefaultHashAlgorithm);
  ~Hasher();
  Hasher(Hasher&&) noexcept;
  Hasher& operator=(Hasher&&) noexcept;
  Hasher(const Hasher&) = delete;
  Hasher& operator=(const Hasher&) = delete;

  void update(std::span<const std::uint8_t> bytes);
  void update(std::string_view bytes);
  void update_zeros(std::size_t count);

  /// Lowercase hex digest. The hasher is reset afterwards.
  std::string finish();

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string digest_bytes(std::span<const std::uint8_t> bytes,
                         std::string_view algorithm = kDefaultHashAlgorithm);
std::string digest_bytes(std::string_view bytes,
                         std::string_view algorithm = kDefaultHashAlgorithm);

/// Digest of a whole file. Throws Error(NotFound|PermissionDenied|IoError).
std::string digest_file(const std::filesystem::path& path,
                        std::string_view algorithm = kDefaultHashAlgorithm);

/// Digest of [offset, offset+length) of a file; bytes past EOF count as zeros.
std::string digest_file_range(const std::filesystem::path& path,
                              std::uint64_t offset, std::uint64_t length,
                              std::string_view algorithm = kDefaultHashAlgorithm);

} // namespace imtk
