#include "imtk/elf_inspector.hpp"

#include "imtk/digest.hpp"
#include "imtk/error.hpp"
#include "imtk/graph.hpp"

#include <elf.h>
#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <deque>
#include <fstream>

namespace imtk::elf {

namespace fs = std::filesystem;

namespace {

/// Read-only private mapping of a whole file.
class MappedFile {
public:
  explicit MappedFile(const fs::path& path) {
    int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd < 0) {
      int err = errno;
      throw Error(errno_to_code(err), path.string() + ": " + std::strerror(err));
    }
    struct stat st {};
    if (::fstat(fd, &st) != 0 || !S_ISREG(st.st_mode)) {
      ::close(fd);
      throw Error(ErrorCode::NotElf, path.string() + ": not a regular file");
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd, 0);
      if (p == MAP_FAILED) {
        int err = errno;
        ::close(fd);
        throw Error(ErrorCode::IoError, path.string() + ": mmap: " + std::strerror(err));
      }
      data_ = static_cast<const std::uint8_t*>(p);
    }
    ::close(fd);
  }
  ~MappedFile() {
    if (data_ != nullptr) ::munmap(const_cast<std::uint8_t*>(data_), size_);
  }
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;

  std::span<const std::uint8_t> bytes() const { return {data_, size_}; }

private:
  const std::uint8_t* data_ = nullptr;
  std::size_t size_ = 0;
};

std::uint64_t page_floor(std::uint64_t v) { return v & ~(page_size() - 1); }

template <typename T>
T read_struct(std::span<const std::uint8_t> image, std::uint64_t offset, const char* table) {
  if (offset > image.size() || image.size() - offset < sizeof(T)) {
    throw Error(ErrorCode::Truncated, std::string(table) + " extends past the end of the file");
  }
  T out;
  std::memcpy(&out, image.data() + offset, sizeof(T));
  return out;
}

std::string machine_name(std::uint16_t machine) {
  switch (machine) {
    case EM_X86_64: return "x86_64";
    case EM_AARCH64: return "aarch64";
    case EM_386: return "i386";
    case EM_RISCV: return "riscv";
    case EM_ARM: return "arm";
    case EM_PPC64: return "ppc64";
    case EM_S390: return "s390";
    default: return "em_" + std::to_string(machine);
  }
}

std::uint32_t jump_slot_type(std::uint16_t machine) {
  switch (machine) {
    case EM_X86_64: return R_X86_64_JUMP_SLOT;
    case EM_AARCH64: return R_AARCH64_JUMP_SLOT;
    case EM_RISCV: return 5; // R_RISCV_JUMP_SLOT
    default: return 0xffffffffu;
  }
}

class ImageReader {
public:
  ImageReader(std::span<const std::uint8_t> image, const std::vector<Elf64_Phdr>& loads)
      : image_(image), loads_(loads) {}

  /// File offset of a link-time address covered by file bytes.
  std::optional<std::uint64_t> offset_of(std::uint64_t vaddr, std::uint64_t length = 1) const {
    for (const auto& ph : loads_) {
      if (vaddr >= ph.p_vaddr && vaddr - ph.p_vaddr < ph.p_filesz &&
          ph.p_filesz - (vaddr - ph.p_vaddr) >= length) {
        return ph.p_offset + (vaddr - ph.p_vaddr);
      }
    }
    return std::nullopt;
  }

  std::uint64_t require_offset(std::uint64_t vaddr, std::uint64_t length, const char* table) const {
    auto off = offset_of(vaddr, std::max<std::uint64_t>(length, 1));
    if (!off || *off > image_.size() || image_.size() - *off < length) {
      throw Error(ErrorCode::MalformedTable,
                  std::string(table) + " at " + format_address(vaddr) + " is not backed by the file");
    }
    return *off;
  }

  std::string string_at(std::uint64_t strtab_off, std::uint64_t strsz, std::uint64_t index,
                        const char* table) const {
    if (index >= strsz || strtab_off + strsz > image_.size()) {
      throw Error(ErrorCode::MalformedTable, std::string(table) + " string index out of range");
    }
    const char* begin = reinterpret_cast<const char*>(image_.data() + strtab_off + index);
    const std::size_t max = static_cast<std::size_t>(strsz - index);
    return std::string(begin, strnlen(begin, max));
  }

private:
  std::span<const std::uint8_t> image_;
  const std::vector<Elf64_Phdr>& loads_;
};

std::vector<std::string> split_path_list(const std::string& list) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    auto colon = list.find(':', start);
    std::string item = list.substr(start, colon == std::string::npos ? std::string::npos : colon - start);
    if (!item.empty()) out.push_back(item);
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  return out;
}

struct Relocs {
  std::uint64_t offset = 0;
  std::uint64_t size = 0;
  bool rela = true;
};

void scan_relocs(std::span<const std::uint8_t> image, const Relocs& table, const char* name,
                 const std::function<void(std::uint64_t r_offset, std::uint32_t type, std::uint32_t sym)>& fn) {
  const std::uint64_t entsize = table.rela ? sizeof(Elf64_Rela) : sizeof(Elf64_Rel);
  if (table.size % entsize != 0) {
    throw Error(ErrorCode::MalformedTable, std::string(name) + " size is not a multiple of the entry size");
  }
  for (std::uint64_t off = table.offset; off < table.offset + table.size; off += entsize) {
    if (table.rela) {
      auto r = read_struct<Elf64_Rela>(image, off, name);
      fn(r.r_offset, static_cast<std::uint32_t>(ELF64_R_TYPE(r.r_info)),
         static_cast<std::uint32_t>(ELF64_R_SYM(r.r_info)));
    } else {
      auto r = read_struct<Elf64_Rel>(image, off, name);
      fn(r.r_offset, static_cast<std::uint32_t>(ELF64_R_TYPE(r.r_info)),
         static_cast<std::uint32_t>(ELF64_R_SYM(r.r_info)));
    }
  }
}

} // namespace

std::string_view to_string(ElfType type) noexcept {
  switch (type) {
    case ElfType::exec: return "exec";
    case ElfType::pie_dyn: return "pie_dyn";
    case ElfType::shared_object: return "shared_object";
  }
  return "unknown";
}

bool LoadSegment::executable() const noexcept { return (flags & PF_X) != 0; }
bool LoadSegment::writable() const noexcept { return (flags & PF_W) != 0; }

std::uint64_t page_size() noexcept {
  static const std::uint64_t size = static_cast<std::uint64_t>(::sysconf(_SC_PAGESIZE));
  return size;
}

// ---------------------------------------------------------------------------

ElfSummary parse_elf(const fs::path& path) {
  MappedFile file(path);
  return parse_elf_image(file.bytes(), path.string());
}

ElfSummary parse_elf_image(std::span<const std::uint8_t> image, std::string path) {
  if (image.size() < SELFMAG || std::memcmp(image.data(), ELFMAG, SELFMAG) != 0) {
    throw Error(ErrorCode::NotElf, path + ": bad magic");
  }
  if (image.size() < EI_NIDENT) throw Error(ErrorCode::Truncated, path + ": ELF identification");
  if (image[EI_CLASS] != ELFCLASS64 || image[EI_DATA] != ELFDATA2LSB) {
    throw Error(ErrorCode::UnsupportedClass, path + ": only 64-bit little-endian ELF is supported");
  }
  const auto eh = read_struct<Elf64_Ehdr>(image, 0, "ELF header");

  ElfSummary s;
  s.path = std::move(path);
  s.machine = eh.e_machine;
  s.machine_name = machine_name(eh.e_machine);

  if (eh.e_phnum > 0 && eh.e_phentsize != sizeof(Elf64_Phdr)) {
    throw Error(ErrorCode::MalformedTable, s.path + ": program header entry size");
  }
  std::vector<Elf64_Phdr> phdrs;
  for (std::uint16_t i = 0; i < eh.e_phnum; ++i) {
    phdrs.push_back(read_struct<Elf64_Phdr>(image, eh.e_phoff + std::uint64_t{i} * sizeof(Elf64_Phdr),
                                            "program header table"));
  }

  std::vector<Elf64_Phdr> loads;
  const Elf64_Phdr* dynamic = nullptr;
  for (const auto& ph : phdrs) {
    switch (ph.p_type) {
      case PT_LOAD: loads.push_back(ph); break;
      case PT_DYNAMIC: dynamic = &ph; break;
      case PT_GNU_RELRO: s.relro = true; break;
      case PT_INTERP: {
        if (ph.p_offset > image.size() || image.size() - ph.p_offset < ph.p_filesz) {
          throw Error(ErrorCode::Truncated, s.path + ": PT_INTERP");
        }
        const char* p = reinterpret_cast<const char*>(image.data() + ph.p_offset);
        s.interpreter = std::string(p, strnlen(p, ph.p_filesz));
        break;
      }
      case PT_NOTE: {
        std::uint64_t off = ph.p_offset;
        const std::uint64_t end = ph.p_offset + ph.p_filesz;
        while (off + sizeof(Elf64_Nhdr) <= end) {
          auto nh = read_struct<Elf64_Nhdr>(image, off, "note segment");
          std::uint64_t name_off = off + sizeof(Elf64_Nhdr);
          std::uint64_t desc_off = name_off + ((nh.n_namesz + 3u) & ~3u);
          std::uint64_t next = desc_off + ((nh.n_descsz + 3u) & ~3u);
          if (next > end || next > image.size()) break;
          if (nh.n_type == NT_GNU_BUILD_ID && nh.n_namesz == 4 &&
              std::memcmp(image.data() + name_off, "GNU", 4) == 0) {
            s.build_id = to_hex(image.subspan(desc_off, nh.n_descsz));
          }
          off = next;
        }
        break;
      }
      default: break;
    }
  }
  std::sort(loads.begin(), loads.end(),
            [](const Elf64_Phdr& a, const Elf64_Phdr& b) { return a.p_vaddr < b.p_vaddr; });
  for (const auto& ph : loads) {
    s.load_segments.push_back({ph.p_vaddr, ph.p_offset, ph.p_filesz, ph.p_memsz, ph.p_flags});
  }

  ImageReader reader(image, loads);
  std::uint64_t flags_1 = 0;

  if (dynamic != nullptr) {
    s.dynamic = true;
    std::optional<std::uint64_t> strtab, strsz, symtab, jmprel, pltrelsz, rela, relasz, rel, relsz;
    std::uint64_t syment = sizeof(Elf64_Sym);
    std::uint64_t pltrel = DT_RELA;
    std::vector<std::uint64_t> needed_idx;
    std::optional<std::uint64_t> rpath_idx, runpath_idx, soname_idx;
    for (std::uint64_t off = dynamic->p_offset; off + sizeof(Elf64_Dyn) <= dynamic->p_offset + dynamic->p_filesz;
         off += sizeof(Elf64_Dyn)) {
      auto d = read_struct<Elf64_Dyn>(image, off, "dynamic section");
      if (d.d_tag == DT_NULL) break;
      const std::uint64_t v = d.d_un.d_val;
      switch (d.d_tag) {
        case DT_NEEDED: needed_idx.push_back(v); break;
        case DT_STRTAB: strtab = v; break;
        case DT_STRSZ: strsz = v; break;
        case DT_SYMTAB: symtab = v; break;
        case DT_SYMENT: syment = v; break;
        case DT_JMPREL: jmprel = v; break;
        case DT_PLTRELSZ: pltrelsz = v; break;
        case DT_PLTREL: pltrel = v; break;
        case DT_RELA: rela = v; break;
        case DT_RELASZ: relasz = v; break;
        case DT_REL: rel = v; break;
        case DT_RELSZ: relsz = v; break;
        case DT_RPATH: rpath_idx = v; break;
        case DT_RUNPATH: runpath_idx = v; break;
        case DT_SONAME: soname_idx = v; break;
        case DT_BIND_NOW: s.bind_now = true; break;
        case DT_FLAGS:
          if (v & DF_BIND_NOW) s.bind_now = true;
          break;
        case DT_FLAGS_1:
          flags_1 = v;
          if (v & DF_1_NOW) s.bind_now = true;
          break;
        default: break;
      }
    }

    std::uint64_t strtab_off = 0;
    if (strtab) {
      if (!strsz) throw Error(ErrorCode::MalformedTable, s.path + ": dynamic string table without DT_STRSZ");
      strtab_off = reader.require_offset(*strtab, *strsz, "dynamic string table");
    } else if (!needed_idx.empty() || rpath_idx || runpath_idx || soname_idx) {
      throw Error(ErrorCode::MalformedTable, s.path + ": dynamic section names strings without DT_STRTAB");
    }
    auto dynstr = [&](std::uint64_t idx) {
      return reader.string_at(strtab_off, *strsz, idx, "dynamic string table");
    };
    for (auto idx : needed_idx) s.needed.push_back(dynstr(idx));
    if (rpath_idx) s.rpath = split_path_list(dynstr(*rpath_idx));
    if (runpath_idx) s.runpath = split_path_list(dynstr(*runpath_idx));
    if (soname_idx) s.soname = dynstr(*soname_idx);

    const std::uint32_t slot_type = jump_slot_type(eh.e_machine);
    if (jmprel && pltrelsz && *pltrelsz > 0) {
      if (pltrel != DT_RELA && pltrel != DT_REL) {
        throw Error(ErrorCode::MalformedTable, s.path + ": PLT relocation table has unknown DT_PLTREL");
      }
      Relocs table{reader.require_offset(*jmprel, *pltrelsz, "PLT relocation table"), *pltrelsz,
                   pltrel == DT_RELA};
      scan_relocs(image, table, "PLT relocation table",
                  [&](std::uint64_t r_offset, std::uint32_t type, std::uint32_t sym) {
                    if (type != slot_type) return;
                    JumpSlotReloc reloc;
                    reloc.slot_vaddr = r_offset;
                    if (sym != 0) {
                      if (!symtab || !strtab) {
                        throw Error(ErrorCode::MalformedTable, s.path + ": jump slot without a symbol table");
                      }
                      auto sym_off = reader.require_offset(*symtab + std::uint64_t{sym} * syment,
                                                           sizeof(Elf64_Sym), "dynamic symbol table");
                      auto es = read_struct<Elf64_Sym>(image, sym_off, "dynamic symbol table");
                      reloc.symbol_name = dynstr(es.st_name);
                    }
                    if (auto off = reader.offset_of(r_offset, 8); off && *off + 8 <= image.size()) {
                      std::uint64_t v = 0;
                      std::memcpy(&v, image.data() + *off, 8);
                      reloc.link_value = v;
                    }
                    s.jump_slot_relocs.push_back(std::move(reloc));
                  });
    }

    auto note_text_reloc = [&](std::uint64_t r_offset) {
      for (const auto& seg : s.load_segments) {
        if (seg.executable() && r_offset >= seg.vaddr && r_offset - seg.vaddr < seg.mem_size) {
          s.text_relocations.push_back(r_offset);
          return;
        }
      }
    };
    auto scan_all = [&](std::optional<std::uint64_t> addr, std::optional<std::uint64_t> size, bool is_rela,
                        const char* name) {
      if (!addr || !size || *size == 0) return;
      Relocs table{reader.require_offset(*addr, *size, name), *size, is_rela};
      scan_relocs(image, table, name, [&](std::uint64_t r_offset, std::uint32_t, std::uint32_t) {
        note_text_reloc(r_offset);
      });
    };
    scan_all(rela, relasz, true, "relocation table");
    scan_all(rel, relsz, false, "relocation table");
    for (const auto& r : s.jump_slot_relocs) note_text_reloc(r.slot_vaddr);
    std::sort(s.text_relocations.begin(), s.text_relocations.end());
  }

  switch (eh.e_type) {
    case ET_EXEC: s.type = ElfType::exec; break;
    case ET_DYN:
      s.type = (s.interpreter || (flags_1 & DF_1_PIE)) ? ElfType::pie_dyn : ElfType::shared_object;
      break;
    default:
      throw Error(ErrorCode::UnsupportedClass,
                  s.path + ": e_type " + std::to_string(eh.e_type) + " is not loadable");
  }

  // Section headers are optional; use them only to locate the PLT.
  if (eh.e_shoff != 0 && eh.e_shnum != 0) {
    if (eh.e_shentsize != sizeof(Elf64_Shdr)) {
      throw Error(ErrorCode::MalformedTable, s.path + ": section header entry size");
    }
    std::vector<Elf64_Shdr> shdrs;
    for (std::uint16_t i = 0; i < eh.e_shnum; ++i) {
      shdrs.push_back(read_struct<Elf64_Shdr>(image, eh.e_shoff + std::uint64_t{i} * sizeof(Elf64_Shdr),
                                              "section header table"));
    }
    if (eh.e_shstrndx < shdrs.size()) {
      const auto& names = shdrs[eh.e_shstrndx];
      if (names.sh_offset + names.sh_size > image.size()) {
        throw Error(ErrorCode::Truncated, s.path + ": section name table");
      }
      for (const auto& sh : shdrs) {
        if (sh.sh_name >= names.sh_size) continue;
        std::string name = reader.string_at(names.sh_offset, names.sh_size, sh.sh_name, "section name table");
        if (name == ".plt" || name == ".plt.sec") s.plt_ranges.push_back({sh.sh_addr, sh.sh_size});
      }
    }
  }
  if (!s.plt_ranges.empty()) s.plt_range = s.plt_ranges.front();
  return s;
}

// ---------------------------------------------------------------------------

LdCache LdCache::load(const fs::path& path) {
  MappedFile file(path);
  return parse(file.bytes());
}

LdCache LdCache::parse(std::span<const std::uint8_t> bytes) {
  constexpr std::string_view kOld = "ld.so-1.7.0";
  constexpr std::string_view kNew = "glibc-ld.so.cache1.1";
  auto fail = [](const std::string& what) -> LdCache {
    throw Error(ErrorCode::MalformedTable, "ld.so.cache: " + what);
  };
  auto u32 = [&](std::uint64_t off) {
    if (off + 4 > bytes.size()) fail("truncated");
    std::uint32_t v = 0;
    std::memcpy(&v, bytes.data() + off, 4);
    return v;
  };
  auto view = [&](std::uint64_t off, std::size_t n) {
    return off + n <= bytes.size() ? std::string_view(reinterpret_cast<const char*>(bytes.data() + off), n)
                                   : std::string_view{};
  };

  std::uint64_t base = 0;
  if (view(0, kOld.size()) == kOld) {
    const std::uint32_t old_n = u32(12);
    base = (16 + std::uint64_t{old_n} * 12 + 7) & ~std::uint64_t{7};
  }
  if (view(base, kNew.size()) != kNew) return fail("no glibc-ld.so.cache1.1 table");
  const std::uint32_t nlibs = u32(base + 20);
  constexpr std::uint64_t kHeader = 48;
  constexpr std::uint64_t kEntry = 24;
  if (base + kHeader + std::uint64_t{nlibs} * kEntry > bytes.size()) return fail("entry table truncated");

  auto cstr = [&](std::uint32_t rel) {
    std::uint64_t off = base + rel;
    if (off >= bytes.size()) fail("string offset out of range");
    const char* p = reinterpret_cast<const char*>(bytes.data() + off);
    return std::string(p, strnlen(p, bytes.size() - off));
  };

  LdCache cache;
  for (std::uint32_t i = 0; i < nlibs; ++i) {
    std::uint64_t e = base + kHeader + std::uint64_t{i} * kEntry;
    std::int32_t flags = 0;
    std::memcpy(&flags, bytes.data() + e, 4);
    if ((flags & 0xff) != 0x03) continue; // FLAG_ELF_LIBC6
    cache.entries_.emplace(cstr(u32(e + 4)), cstr(u32(e + 8)));
  }
  return cache;
}

std::vector<std::string> LdCache::lookup(std::string_view soname) const {
  std::vector<std::string> out;
  auto [lo, hi] = entries_.equal_range(soname);
  for (auto it = lo; it != hi; ++it) out.push_back(it->second);
  return out;
}

namespace {

class ClosureResolver {
public:
  ClosureResolver(const SearchConfig& config, const ElfSummary& main) : config_(config), main_(main) {
    if (config_.use_cache) {
      try {
        cache_ = LdCache::load(host(config_.cache_path.string()));
      } catch (const Error&) {
        cache_.reset();
      }
    }
  }

  DependencyClosure run() {
    DependencyClosure out;
    std::set<std::string> libs;
    std::set<std::string> unresolved;
    if (main_.interpreter) {
      if (auto p = canonical(*main_.interpreter)) libs.insert(*p);
    }
    struct Pending {
      std::string name;
      std::shared_ptr<const ElfSummary> requester;
    };
    auto main_ptr = std::shared_ptr<const ElfSummary>(&main_, [](const ElfSummary*) {});
    std::deque<Pending> queue;
    for (const auto& n : main_.needed) queue.push_back({n, main_ptr});
    std::map<std::string, std::string> by_name;
    while (!queue.empty()) {
      Pending p = std::move(queue.front());
      queue.pop_front();
      if (by_name.contains(p.name)) continue;
      auto found = resolve(p.name, *p.requester);
      if (!found) {
        unresolved.insert(p.name);
        continue;
      }
      by_name[p.name] = found->first;
      if (!libs.insert(found->first).second) continue;
      for (const auto& n : found->second->needed) queue.push_back({n, found->second});
    }
    out.libraries.assign(libs.begin(), libs.end());
    out.unresolved.assign(unresolved.begin(), unresolved.end());
    return out;
  }

private:
  std::string host(const std::string& logical) const {
    if (config_.root == "/" || config_.root.empty()) return logical;
    return (config_.root / fs::path(logical).relative_path()).string();
  }

  std::optional<std::string> canonical(const std::string& logical) const {
    std::error_code ec;
    if (config_.root == "/" || config_.root.empty()) {
      auto c = fs::canonical(logical, ec);
      if (ec) return std::nullopt;
      return c.string();
    }
    auto root = fs::canonical(config_.root, ec);
    if (ec) return std::nullopt;
    auto c = fs::canonical(host(logical), ec);
    if (ec) return std::nullopt;
    auto rel = c.lexically_relative(root);
    if (rel.empty() || rel.native().starts_with("..")) return fs::path(logical).lexically_normal().string();
    return (fs::path("/") / rel).string();
  }

  bool compatible(const std::string& logical) const {
    std::ifstream in(host(logical), std::ios::binary);
    if (!in) return false;
    Elf64_Ehdr eh{};
    in.read(reinterpret_cast<char*>(&eh), sizeof eh);
    if (in.gcount() != sizeof eh) return false;
    return std::memcmp(eh.e_ident, ELFMAG, SELFMAG) == 0 && eh.e_ident[EI_CLASS] == ELFCLASS64 &&
           eh.e_ident[EI_DATA] == ELFDATA2LSB && eh.e_machine == main_.machine;
  }

  std::string expand(const std::string& dir, const ElfSummary& requester) const {
    std::string origin = fs::path(requester.path).parent_path().string();
    std::string out;
    for (std::size_t i = 0; i < dir.size();) {
      auto try_token = [&](std::string_view token, const std::string& value) {
        std::string plain = "$" + std::string(token);
        std::string braced = "${" + std::string(token) + "}";
        if (dir.compare(i, braced.size(), braced) == 0) {
          out += value;
          i += braced.size();
          return true;
        }
        if (dir.compare(i, plain.size(), plain) == 0) {
          out += value;
          i += plain.size();
          return true;
        }
        return false;
      };
      if (dir[i] == '$' && (try_token("ORIGIN", origin) || try_token("LIB", "lib/x86_64-linux-gnu") ||
                            try_token("PLATFORM", main_.machine_name))) {
        continue;
      }
      out.push_back(dir[i++]);
    }
    return out;
  }

  std::optional<std::pair<std::string, std::shared_ptr<const ElfSummary>>> accept(const std::string& logical) {
    if (!compatible(logical)) return std::nullopt;
    auto canon = canonical(logical);
    if (!canon) return std::nullopt;
    if (auto it = parsed_.find(*canon); it != parsed_.end()) return std::pair{*canon, it->second};
    try {
      auto summary = std::make_shared<ElfSummary>(parse_elf(host(*canon)));
      summary->path = *canon;
      parsed_[*canon] = summary;
      return std::pair{*canon, std::shared_ptr<const ElfSummary>(summary)};
    } catch (const Error&) {
      return std::nullopt;
    }
  }

  std::optional<std::pair<std::string, std::shared_ptr<const ElfSummary>>> resolve(const std::string& name,
                                                                                   const ElfSummary& requester) {
    if (name.find('/') != std::string::npos) return accept(name);
    std::vector<std::string> dirs;
    if (requester.runpath.empty()) {
      for (const auto& d : requester.rpath) dirs.push_back(expand(d, requester));
      if (&requester != &main_ && main_.runpath.empty()) {
        for (const auto& d : main_.rpath) dirs.push_back(expand(d, main_));
      }
    }
    for (const auto& d : requester.runpath) dirs.push_back(expand(d, requester));
    for (const auto& d : dirs) {
      if (auto r = accept((fs::path(d) / name).string())) return r;
    }
    if (cache_) {
      for (const auto& candidate : cache_->lookup(name)) {
        if (auto r = accept(candidate)) return r;
      }
    }
    for (const auto& d : config_.standard_dirs) {
      if (auto r = accept((fs::path(d) / name).string())) return r;
    }
    return std::nullopt;
  }

  const SearchConfig& config_;
  const ElfSummary& main_;
  std::optional<LdCache> cache_;
  std::map<std::string, std::shared_ptr<const ElfSummary>> parsed_;
};

} // namespace

DependencyClosure resolve_dependency_closure(const ElfSummary& summary, const SearchConfig& config) {
  if (!summary.dynamic) return {};
  return ClosureResolver(config, summary).run();
}

// ---------------------------------------------------------------------------

std::vector<ExpectedExecHash> expected_exec_hashes(const ElfSummary& summary, std::string_view algorithm,
                                                   const fs::path& source) {
  const fs::path& from = source.empty() ? fs::path(summary.path) : source;
  std::vector<ExpectedExecHash> out;
  for (const auto& seg : summary.load_segments) {
    if (!seg.executable() || seg.file_size == 0) continue;
    ExpectedExecHash h;
    h.file_offset = page_floor(seg.file_offset);
    h.length = seg.file_offset + seg.file_size - h.file_offset;
    h.vaddr = page_floor(seg.vaddr);
    h.digest = digest_file_range(from, h.file_offset, h.length, algorithm);
    h.relocated = std::any_of(summary.text_relocations.begin(), summary.text_relocations.end(),
                              [&](std::uint64_t r) { return r >= seg.vaddr && r - seg.vaddr < seg.mem_size; });
    out.push_back(std::move(h));
  }
  return out;
}

std::optional<std::uint64_t> MemoryReader::read_u64(std::uint64_t addr) {
  std::uint8_t buf[8];
  if (!read(addr, buf)) return std::nullopt;
  std::uint64_t v = 0;
  std::memcpy(&v, buf, 8);
  return v;
}

ProcessMemory::ProcessMemory(std::int64_t pid) {
  std::string path = "/proc/" + std::to_string(pid) + "/mem";
  fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd_ < 0) {
    int err = errno;
    ErrorCode code = errno_to_code(err);
    if (code == ErrorCode::NotFound) code = ErrorCode::Vanished;
    throw Error(code, path + ": " + std::strerror(err));
  }
}

ProcessMemory::~ProcessMemory() {
  if (fd_ >= 0) ::close(fd_);
}

bool ProcessMemory::read(std::uint64_t addr, std::span<std::uint8_t> out) {
  std::size_t done = 0;
  while (done < out.size()) {
    ssize_t n = ::pread64(fd_, out.data() + done, out.size() - done, static_cast<off64_t>(addr + done));
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    done += static_cast<std::size_t>(n);
  }
  return true;
}

std::shared_ptr<const CachedObject> ElfCache::get(const fs::path& open_path, const std::string& logical_path,
                                                  const std::string& device, std::uint64_t inode) {
  const std::string key = device + ":" + std::to_string(inode) + ":" + logical_path;
  {
    std::lock_guard lock(mutex_);
    if (auto it = objects_.find(key); it != objects_.end()) return it->second;
  }
  auto obj = std::make_shared<CachedObject>();
  try {
    obj->summary = parse_elf(open_path);
    obj->summary->path = logical_path;
    try {
      obj->expected = expected_exec_hashes(*obj->summary, algorithm_, open_path);
    } catch (const Error& e) {
      obj->expected_error = e.what();
    }
  } catch (const Error& e) {
    obj->error = e.what();
  }
  std::lock_guard lock(mutex_);
  auto [it, inserted] = objects_.emplace(key, std::move(obj));
  return it->second;
}

MappingFileLocator proc_locator(std::int64_t pid) {
  return [pid](const procfs::MapsEntry& m) -> fs::path {
    char name[64];
    std::snprintf(name, sizeof name, "%llx-%llx", static_cast<unsigned long long>(m.start),
                  static_cast<unsigned long long>(m.end));
    fs::path link = fs::path("/proc") / std::to_string(pid) / "map_files" / name;
    if (::access(link.c_str(), R_OK) == 0) return link;
    return fs::path(m.path);
  };
}

std::vector<ExecRegionHash> read_exec_region_hashes(MemoryReader& memory,
                                                    const std::vector<procfs::MapsEntry>& mappings,
                                                    ElfCache& cache, const MappingFileLocator& locate) {
  std::vector<ExecRegionHash> out;
  std::vector<std::uint8_t> buf(1 << 20);
  Hasher hasher(cache.algorithm());
  for (const auto& m : mappings) {
    if (!m.executable()) continue;
    ExecRegionHash r;
    r.start = m.start;
    r.end = m.end;
    r.path = m.path;
    std::uint64_t window = m.end - m.start;
    if (m.file_backed() && !m.writable()) {
      auto obj = cache.get(locate(m), m.path, procfs::format_device(m.dev_major, m.dev_minor), m.inode);
      if (obj->summary && obj->expected_error.empty()) {
        for (const auto& exp : obj->expected) {
          const std::uint64_t seg_end = exp.file_offset + exp.length;
          if (m.offset < exp.file_offset || m.offset >= seg_end) continue;
          // A protection change splits a segment into several mappings;
          // each piece is compared with the file bytes it maps.
          window = std::min(m.end - m.start, seg_end - m.offset);
          if (m.offset == exp.file_offset && window == exp.length) {
            r.expected_digest = exp.digest;
          } else {
            try {
              r.expected_digest = digest_file_range(locate(m), m.offset, window, cache.algorithm());
            } catch (const Error&) {
              window = m.end - m.start;
              break;
            }
          }
          r.comparable = !exp.relocated;
          break;
        }
      }
    }
    r.hashed_length = window;
    bool ok = true;
    for (std::uint64_t done = 0; done < window;) {
      std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(buf.size(), window - done));
      if (!memory.read(m.start + done, std::span(buf.data(), n))) {
        ok = false;
        r.fault = "read fault at " + format_address(m.start + done);
        break;
      }
      hasher.update(std::span<const std::uint8_t>(buf.data(), n));
      done += n;
    }
    std::string digest = hasher.finish();
    if (ok) {
      r.observed_digest = std::move(digest);
    } else {
      r.comparable = false;
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ExecRegionHash> read_exec_region_hashes(std::int64_t pid,
                                                    const std::vector<procfs::MapsEntry>& mappings,
                                                    ElfCache& cache) {
  ProcessMemory memory(pid);
  return read_exec_region_hashes(memory, mappings, cache, proc_locator(pid));
}

// ---------------------------------------------------------------------------

std::string_view to_string(GotClass cls) noexcept {
  switch (cls) {
    case GotClass::unresolved_stub: return "unresolved_stub";
    case GotClass::resolved: return "resolved";
    case GotClass::anomalous: return "anomalous";
  }
  return "anomalous";
}

std::optional<std::uint64_t> compute_load_base(const ElfSummary& summary,
                                               const std::vector<procfs::MapsEntry>& mappings,
                                               const std::string& object_path) {
  if (summary.load_segments.empty()) return std::nullopt;
  const auto& first = summary.load_segments.front();
  std::optional<std::uint64_t> best;
  for (const auto& m : mappings) {
    if (m.path != object_path || m.offset != page_floor(first.file_offset)) continue;
    if (!best || m.start < *best) best = m.start;
  }
  if (!best) return std::nullopt;
  return *best - page_floor(first.vaddr);
}

namespace {

const procfs::MapsEntry* mapping_containing(const std::vector<procfs::MapsEntry>& mappings, std::uint64_t addr) {
  for (const auto& m : mappings) {
    if (addr >= m.start && addr < m.end) return &m;
  }
  return nullptr;
}

std::optional<std::uint64_t> module_base(const std::vector<procfs::MapsEntry>& mappings, const std::string& path) {
  std::optional<std::uint64_t> base;
  for (const auto& m : mappings) {
    if (m.path == path && (!base || m.start < *base)) base = m.start;
  }
  return base;
}

} // namespace

GotClass classify_got_value(std::uint64_t value, const ElfSummary& summary, std::uint64_t load_base,
                            const JumpSlotReloc& reloc, const std::vector<procfs::MapsEntry>& mappings,
                            const std::set<std::string>& members, std::string* target_module) {
  if (value >= load_base) {
    for (const auto& plt : summary.plt_ranges) {
      if (plt.contains(value - load_base)) {
        if (target_module) *target_module = summary.path;
        return GotClass::unresolved_stub;
      }
    }
  }
  if (reloc.link_value && *reloc.link_value != 0 &&
      (value == *reloc.link_value + load_base || value == *reloc.link_value)) {
    if (target_module) *target_module = summary.path;
    return GotClass::unresolved_stub;
  }
  const procfs::MapsEntry* m = mapping_containing(mappings, value);
  if (m != nullptr && m->file_backed() && target_module) *target_module = m->path;
  if (m != nullptr && m->executable() && m->file_backed() && members.contains(m->path)) {
    return GotClass::resolved;
  }
  return GotClass::anomalous;
}

GotTable extract_got_entries(MemoryReader& memory, const ElfSummary& summary, std::uint64_t load_base,
                             const std::vector<procfs::MapsEntry>& mappings,
                             const std::set<std::string>& members) {
  GotTable table;
  table.object = summary.path;
  table.load_base = load_base;
  table.relro = summary.relro;
  table.bind_now = summary.bind_now;
  for (const auto& reloc : summary.jump_slot_relocs) {
    GotEntry e;
    e.symbol_name = reloc.symbol_name;
    e.slot_vaddr = reloc.slot_vaddr;
    e.slot_addr = reloc.slot_vaddr + load_base;
    auto value = memory.read_u64(e.slot_addr);
    if (!value) {
      e.read_fault = true;
      e.classification = GotClass::anomalous;
    } else {
      e.stored_value = *value;
      e.classification = classify_got_value(*value, summary, load_base, reloc, mappings, members, &e.target_module);
      if (!e.target_module.empty()) {
        if (auto base = module_base(mappings, e.target_module); base && *value >= *base) {
          e.target_offset = static_cast<std::int64_t>(*value - *base);
        }
      }
    }
    table.entries.push_back(std::move(e));
  }
  return table;
}

} // namespace imtk::elf
