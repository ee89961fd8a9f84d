#include "imtk/digest.hpp"

#include "imtk/error.hpp"

#include <openssl/evp.h>

#include <cerrno>
#include <cstring>
#include <fcntl.h>
#include <unistd.h>

#include <array>
#include <vector>

namespace imtk {

namespace {

const EVP_MD* lookup(std::string_view algorithm) {
  if (algorithm == "sha256") return EVP_sha256();
  if (algorithm == "sha512") return EVP_sha512();
  return nullptr;
}

class Fd {
public:
  explicit Fd(int fd) : fd_(fd) {}
  ~Fd() {
    if (fd_ >= 0) ::close(fd_);
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  int get() const { return fd_; }

private:
  int fd_;
};

Fd open_for_hash(const std::filesystem::path& path) {
  int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd < 0) {
    int err = errno;
    throw Error(errno_to_code(err), path.string() + ": " + std::strerror(err));
  }
  return Fd(fd);
}

} // namespace

std::size_t digest_hex_length(std::string_view algorithm) noexcept {
  if (algorithm == "sha256") return 64;
  if (algorithm == "sha512") return 128;
  return 0;
}

bool is_lower_hex(std::string_view text) noexcept {
  for (char c : text) {
    if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
  }
  return true;
}

std::string to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xf]);
  }
  return out;
}

struct Hasher::Impl {
  const EVP_MD* md = nullptr;
  EVP_MD_CTX* ctx = nullptr;
  ~Impl() { EVP_MD_CTX_free(ctx); }
};

Hasher::Hasher(std::string_view algorithm) : impl_(std::make_unique<Impl>()) {
  impl_->md = lookup(algorithm);
  if (impl_->md == nullptr) {
    throw Error(ErrorCode::IoError,
                "unsupported hash algorithm '" + std::string(algorithm) + "'");
  }
  impl_->ctx = EVP_MD_CTX_new();
  if (impl_->ctx == nullptr || EVP_DigestInit_ex(impl_->ctx, impl_->md, nullptr) != 1) {
    throw Error(ErrorCode::IoError, "digest initialisation failed");
  }
}

Hasher::~Hasher() = default;
Hasher::Hasher(Hasher&&) noexcept = default;
Hasher& Hasher::operator=(Hasher&&) noexcept = default;

void Hasher::update(std::span<const std::uint8_t> bytes) {
  if (!bytes.empty()) EVP_DigestUpdate(impl_->ctx, bytes.data(), bytes.size());
}

void Hasher::update(std::string_view bytes) {
  if (!bytes.empty()) EVP_DigestUpdate(impl_->ctx, bytes.data(), bytes.size());
}

void Hasher::update_zeros(std::size_t count) {
  static const std::array<std::uint8_t, 4096> kZeros{};
  while (count > 0) {
    std::size_t n = std::min(count, kZeros.size());
    EVP_DigestUpdate(impl_->ctx, kZeros.data(), n);
    count -= n;
  }
}

std::string Hasher::finish() {
  std::array<std::uint8_t, EVP_MAX_MD_SIZE> out{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(impl_->ctx, out.data(), &len);
  EVP_DigestInit_ex(impl_->ctx, impl_->md, nullptr);
  return to_hex(std::span(out.data(), len));
}

std::string digest_bytes(std::span<const std::uint8_t> bytes, std::string_view algorithm) {
  Hasher h(algorithm);
  h.update(bytes);
  return h.finish();
}

std::string digest_bytes(std::string_view bytes, std::string_view algorithm) {
  Hasher h(algorithm);
  h.update(bytes);
  return h.finish();
}

std::string digest_file(const std::filesystem::path& path, std::string_view algorithm) {
  Hasher h(algorithm);
  Fd fd = open_for_hash(path);
  std::vector<std::uint8_t> buf(1 << 16);
  for (;;) {
    ssize_t n = ::read(fd.get(), buf.data(), buf.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::IoError, path.string() + ": " + std::strerror(errno));
    }
    if (n == 0) break;
    h.update(std::span(buf.data(), static_cast<std::size_t>(n)));
  }
  return h.finish();
}

std::string digest_file_range(const std::filesystem::path& path, std::uint64_t offset,
                              std::uint64_t length, std::string_view algorithm) {
  Hasher h(algorithm);
  Fd fd = open_for_hash(path);
  std::vector<std::uint8_t> buf(1 << 16);
  std::uint64_t done = 0;
  while (done < length) {
    std::size_t want = static_cast<std::size_t>(std::min<std::uint64_t>(buf.size(), length - done));
    ssize_t n = ::pread(fd.get(), buf.data(), want, static_cast<off_t>(offset + done));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::IoError, path.string() + ": " + std::strerror(errno));
    }
    if (n == 0) break;
    h.update(std::span(buf.data(), static_cast<std::size_t>(n)));
    done += static_cast<std::uint64_t>(n);
  }
  h.update_zeros(static_cast<std::size_t>(length - done));
  return h.finish();
}

} // namespace imtk
