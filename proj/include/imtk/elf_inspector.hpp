#pragma once

#include "imtk/procfs.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace imtk::elf {

enum class ElfType { exec, pie_dyn, shared_object };

std::string_view to_string(ElfType type) noexcept;

struct LoadSegment {
  std::uint64_t vaddr = 0;
  std::uint64_t file_offset = 0;
  std::uint64_t file_size = 0;
  std::uint64_t mem_size = 0;
  std::uint32_t flags = 0; // PF_R | PF_W | PF_X

  bool executable() const noexcept;
  bool writable() const noexcept;
};

struct JumpSlotReloc {
  std::string symbol_name;
  std::uint64_t slot_vaddr = 0;
  /// Slot content in the file (the lazy-binding stub address), if file-backed.
  std::optional<std::uint64_t> link_value;
};

struct VRange {
  std::uint64_t vaddr = 0;
  std::uint64_t size = 0;
  bool contains(std::uint64_t addr) const noexcept { return addr >= vaddr && addr - vaddr < size; }
};

struct ElfSummary {
  std::string path;
  ElfType type = ElfType::exec;
  std::uint16_t machine = 0;
  std::string machine_name;
  std::string elf_class = "elf64";
  std::vector<LoadSegment> load_segments; // sorted by vaddr
  std::vector<std::string> needed;
  std::vector<JumpSlotReloc> jump_slot_relocs;
  /// .plt and .plt.sec when section headers are present.
  std::vector<VRange> plt_ranges;
  std::optional<VRange> plt_range; // first of plt_ranges
  bool relro = false;
  bool bind_now = false;
  std::optional<std::string> build_id;
  std::optional<std::string> interpreter;
  std::optional<std::string> soname;
  std::vector<std::string> rpath;
  std::vector<std::string> runpath;
  bool dynamic = false;
  /// Link-time addresses patched by relocations that land in executable segments.
  std::vector<std::uint64_t> text_relocations;
};

/// Throws Error(NotElf | Truncated | UnsupportedClass | MalformedTable | IoError).
ElfSummary parse_elf(const std::filesystem::path& path);
ElfSummary parse_elf_image(std::span<const std::uint8_t> image, std::string path);

// ---------------------------------------------------------------------------
// Dependency closure
// ---------------------------------------------------------------------------

/// Parsed /etc/ld.so.cache (new "glibc-ld.so.cache1.1" format, optionally
/// preceded by the old "ld.so-1.7.0" table).
class LdCache {
public:
  static LdCache load(const std::filesystem::path& path);
  static LdCache parse(std::span<const std::uint8_t> bytes);

  /// Candidate paths for a soname, in cache order.
  std::vector<std::string> lookup(std::string_view soname) const;
  std::size_t size() const noexcept { return entries_.size(); }

private:
  std::multimap<std::string, std::string, std::less<>> entries_;
};

struct SearchConfig {
  /// Filesystem root the dependency names are resolved under.
  std::filesystem::path root = "/";
  bool use_cache = true;
  std::filesystem::path cache_path = "/etc/ld.so.cache";
  std::vector<std::string> standard_dirs = {
      "/lib/x86_64-linux-gnu", "/usr/lib/x86_64-linux-gnu", "/lib64", "/usr/lib64", "/lib", "/usr/lib",
  };
};

struct DependencyClosure {
  std::vector<std::string> libraries;  // canonical paths, sorted, includes the interpreter
  std::vector<std::string> unresolved; // needed names that did not resolve, sorted
};

/// Transitive closure of DT_NEEDED. Search order: DT_RPATH (when there is no
/// DT_RUNPATH) and DT_RUNPATH of the requesting object, the shared-library
/// cache, the standard directories. LD_LIBRARY_PATH is not consulted.
DependencyClosure resolve_dependency_closure(const ElfSummary& summary, const SearchConfig& config);

// ---------------------------------------------------------------------------
// Executable content
// ---------------------------------------------------------------------------

std::uint64_t page_size() noexcept;

struct ExpectedExecHash {
  std::uint64_t file_offset = 0; // page-aligned start
  std::uint64_t length = 0;      // up to the end of the segment's file bytes
  std::uint64_t vaddr = 0;       // page-aligned link-time address
  std::string digest;
  bool relocated = false; // text relocations land inside; not comparable
};

/// One entry per executable load segment with file bytes. `source` defaults
/// to summary.path (a /proc/<pid>/map_files link works too).
std::vector<ExpectedExecHash> expected_exec_hashes(const ElfSummary& summary,
                                                   std::string_view algorithm = "sha256",
                                                   const std::filesystem::path& source = {});

/// Reads another process's memory. Returns false on a fault.
class MemoryReader {
public:
  virtual ~MemoryReader() = default;
  virtual bool read(std::uint64_t addr, std::span<std::uint8_t> out) = 0;
  std::optional<std::uint64_t> read_u64(std::uint64_t addr);
};

/// /proc/<pid>/mem backed reader.
class ProcessMemory : public MemoryReader {
public:
  /// Throws Error(Vanished | PermissionDenied | IoError).
  explicit ProcessMemory(std::int64_t pid);
  ~ProcessMemory() override;
  ProcessMemory(const ProcessMemory&) = delete;
  ProcessMemory& operator=(const ProcessMemory&) = delete;
  bool read(std::uint64_t addr, std::span<std::uint8_t> out) override;

private:
  int fd_ = -1;
};

/// Parsed object plus its expected hashes, shared across processes.
struct CachedObject {
  std::optional<ElfSummary> summary;
  std::string error; // set when parsing failed
  std::vector<ExpectedExecHash> expected;
  std::string expected_error;
};

/// Thread-safe cache keyed by (device, inode, path).
class ElfCache {
public:
  explicit ElfCache(std::string algorithm = "sha256") : algorithm_(std::move(algorithm)) {}

  /// `open_path` is where the bytes are read from; `logical_path` is the name
  /// recorded in the summary.
  std::shared_ptr<const CachedObject> get(const std::filesystem::path& open_path,
                                          const std::string& logical_path, const std::string& device,
                                          std::uint64_t inode);
  const std::string& algorithm() const noexcept { return algorithm_; }
  std::size_t size() {
    std::lock_guard lock(mutex_);
    return objects_.size();
  }

private:
  std::string algorithm_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const CachedObject>> objects_;
};

struct ExecRegionHash {
  std::uint64_t start = 0;
  std::uint64_t end = 0;
  std::string path;
  std::string observed_digest; // empty on a read fault
  std::optional<std::string> expected_digest;
  bool comparable = false;
  std::uint64_t hashed_length = 0;
  std::optional<std::string> fault;
};

/// Resolves the file to read for a mapping; defaults to map_files/ then the path.
using MappingFileLocator = std::function<std::filesystem::path(const procfs::MapsEntry&)>;

MappingFileLocator proc_locator(std::int64_t pid);

/// Hash of every executable mapping. Comparable only for file-backed,
/// non-writable mappings whose file range starts inside an executable load
/// segment without text relocations; the expected digest covers the same
/// file bytes.
std::vector<ExecRegionHash> read_exec_region_hashes(MemoryReader& memory,
                                                    const std::vector<procfs::MapsEntry>& mappings,
                                                    ElfCache& cache, const MappingFileLocator& locate);

std::vector<ExecRegionHash> read_exec_region_hashes(std::int64_t pid,
                                                    const std::vector<procfs::MapsEntry>& mappings,
                                                    ElfCache& cache);

// ---------------------------------------------------------------------------
// GOT / PLT
// ---------------------------------------------------------------------------

enum class GotClass { unresolved_stub, resolved, anomalous };

std::string_view to_string(GotClass cls) noexcept;

struct GotEntry {
  std::string symbol_name;
  std::uint64_t slot_vaddr = 0;
  std::uint64_t slot_addr = 0;
  std::uint64_t stored_value = 0;
  GotClass classification = GotClass::anomalous;
  std::string target_module;       // resolved: module containing the value
  std::int64_t target_offset = -1; // value - target module base
  bool read_fault = false;
};

struct GotTable {
  std::string object;
  std::uint64_t load_base = 0;
  bool relro = false;
  bool bind_now = false;
  std::vector<GotEntry> entries;
};

/// Load bias of `object_path` in the process, from its lowest load segment's mapping.
std::optional<std::uint64_t> compute_load_base(const ElfSummary& summary,
                                               const std::vector<procfs::MapsEntry>& mappings,
                                               const std::string& object_path);

/// Classifies one stored slot value.
///  - unresolved_stub: inside the object's own PLT, or equal to the lazy stub value
///  - resolved:        inside an executable mapping of a member module
///  - anomalous:       anything else
GotClass classify_got_value(std::uint64_t value, const ElfSummary& summary, std::uint64_t load_base,
                            const JumpSlotReloc& reloc, const std::vector<procfs::MapsEntry>& mappings,
                            const std::set<std::string>& members, std::string* target_module = nullptr);

/// Reads each jump slot from memory and classifies it. `members` is the set of
/// module paths a slot may legitimately resolve into (the object itself and
/// its dependency closure).
GotTable extract_got_entries(MemoryReader& memory, const ElfSummary& summary, std::uint64_t load_base,
                             const std::vector<procfs::MapsEntry>& mappings,
                             const std::set<std::string>& members);

} // namespace imtk::elf
