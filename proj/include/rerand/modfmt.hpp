#pragma once

/// \file
/// Position-independent module images: sections, symbols, relocations,
/// exports, and the ADLM binary serialization.
///
/// A module is split into a movable part (text/data — relocated on
/// every re-randomization) and an immovable part (fixed_text/rodata —
/// placed once). Code never embeds absolute addresses: ABS64 sites are
/// restricted to data; code reaches other addresses through PC-relative
/// displacements or per-part indirection tables filled in by the loader.

#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "rerand/util.hpp"

namespace rerand::modfmt {

enum class part : u8 { movable = 0, immovable = 1 };
enum class section_kind : u8 { text = 0, data = 1, rodata = 2, fixed_text = 3 };
enum class binding : u8 { local = 0, exported = 1, imported = 2 };
enum class reloc_kind : u8 {
  abs64 = 0,      // 8-byte absolute address; data sections only
  pc32 = 1,       // i32 displacement to the target
  got_local = 2,  // i32 displacement to a movable-target table slot
  got_fixed = 3,  // i32 displacement to a stable-target table slot
  plt32 = 4,      // call to a symbol, possibly through a stub
};

inline constexpr u32 kUndefinedSection = 0xFFFFFFFFu;

/// Import name the loader resolves to the per-part key slot instead of
/// the host symbol table. The assembler references it in prologues.
inline constexpr const char* kKeySymbol = "__key";

/// Section part is implied by its kind.
inline constexpr part part_for(section_kind k) {
  return (k == section_kind::rodata || k == section_kind::fixed_text)
             ? part::immovable
             : part::movable;
}

struct section {
  std::string name;
  part where = part::movable;
  section_kind kind = section_kind::text;
  std::vector<u8> bytes;
  u32 align = 16;  // power of two, at most 4096

  bool operator==(const section&) const = default;
};

struct symbol {
  std::string name;
  binding bind = binding::local;
  u32 section = kUndefinedSection;
  u64 offset = 0;

  bool operator==(const symbol&) const = default;
};

/// For code relocations `offset` addresses the *start* of the affected
/// instruction, so the loader can re-encode it in place; for abs64 it
/// addresses the 8 target bytes directly.
struct relocation {
  u32 section = 0;
  u64 offset = 0;
  reloc_kind kind = reloc_kind::pc32;
  u32 target = 0;
  i64 addend = 0;

  bool operator==(const relocation&) const = default;
};

struct module_image {
  std::string name;
  std::vector<section> sections;
  std::vector<symbol> symbols;
  std::vector<relocation> relocations;
  std::vector<std::string> exports;
  std::optional<std::string> update_hook;

  bool operator==(const module_image&) const = default;

  const symbol* find_symbol(const std::string& n) const {
    for (const auto& s : symbols)
      if (s.name == n) return &s;
    return nullptr;
  }
};

// -- validation -----------------------------------------------------------

namespace detail {
[[noreturn]] inline void fail(const char* rule, const std::string& what) {
  throw validation_error(std::string(rule) + ": " + what);
}
}  // namespace detail

/// Checks every structural invariant; throws a validation_error whose
/// message starts with the first violated rule's identifier.
inline void validate(const module_image& m) {
  using detail::fail;
  if (m.name.empty()) fail("module_name", "module name must not be empty");

  for (size_t i = 0; i < m.sections.size(); ++i) {
    const section& s = m.sections[i];
    for (size_t j = 0; j < i; ++j)
      if (m.sections[j].name == s.name)
        fail("section_names_unique", "duplicate section " + s.name);
    if (s.align == 0 || (s.align & (s.align - 1)) != 0 || s.align > 4096)
      fail("align_pow2", "bad alignment in " + s.name);
    switch (s.kind) {
      case section_kind::rodata:
        if (s.where != part::immovable)
          fail("rodata_immovable", s.name + " must be immovable");
        break;
      case section_kind::fixed_text:
        if (s.where != part::immovable)
          fail("fixed_text_immovable", s.name + " must be immovable");
        break;
      case section_kind::text:
        if (s.where != part::movable)
          fail("text_movable", s.name + " must be movable");
        break;
      case section_kind::data:
        if (s.where != part::movable)
          fail("data_movable", s.name + " must be movable");
        break;
    }
  }

  for (const symbol& sym : m.symbols) {
    if (sym.bind == binding::imported) {
      if (sym.section != kUndefinedSection)
        fail("import_undefined", sym.name + " must have no section");
      continue;
    }
    if (sym.section == kUndefinedSection || sym.section >= m.sections.size())
      fail("symbol_section", sym.name + " bound to invalid section");
    const section& s = m.sections[sym.section];
    if (sym.offset > s.bytes.size())
      fail("symbol_offset", sym.name + " offset beyond section");
    if (sym.bind == binding::exported &&
        (s.kind != section_kind::text || s.where != part::movable))
      fail("export_movable_text", sym.name + " must live in movable text");
  }

  for (const relocation& r : m.relocations) {
    if (r.section >= m.sections.size())
      fail("site_section", "relocation site section out of range");
    if (r.target >= m.symbols.size())
      fail("bad_index", "relocation target out of range");
    const section& s = m.sections[r.section];
    const u64 site_size = r.kind == reloc_kind::abs64 ? 8 : 1;
    if (r.offset + site_size > s.bytes.size())
      fail("site_range", "relocation site beyond section bytes");
    if (r.kind == reloc_kind::abs64 && s.kind != section_kind::data)
      fail("abs64_in_code", "absolute sites allowed in data only");
  }

  for (const std::string& e : m.exports) {
    const symbol* sym = m.find_symbol(e);
    if (sym == nullptr) fail("export_unknown", e + " not in symbol table");
    if (sym->bind != binding::exported)
      fail("export_binding", e + " not marked exported");
  }

  if (m.update_hook) {
    const symbol* sym = m.find_symbol(*m.update_hook);
    if (sym == nullptr) fail("hook_unknown", *m.update_hook + " undefined");
    // The randomizer invokes the hook through its wrapper, so it must
    // be exported like any other entry point.
    bool listed = false;
    for (const auto& e : m.exports) listed |= (e == *m.update_hook);
    if (!listed) fail("hook_not_exported", *m.update_hook + " must be exported");
  }
}

// -- builder ----------------------------------------------------------------

/// Programmatic image construction; the result is validated.
class builder {
 public:
  explicit builder(std::string name) { img_.name = std::move(name); }

  u32 add_section(std::string name, section_kind kind, u32 align = 16) {
    section s;
    s.name = std::move(name);
    s.kind = kind;
    s.where = part_for(kind);
    s.align = align;
    img_.sections.push_back(std::move(s));
    return static_cast<u32>(img_.sections.size() - 1);
  }

  std::vector<u8>& bytes(u32 sec) { return img_.sections.at(sec).bytes; }

  u32 add_symbol(std::string name, binding bind, u32 sec, u64 offset) {
    img_.symbols.push_back(symbol{std::move(name), bind, sec, offset});
    return static_cast<u32>(img_.symbols.size() - 1);
  }

  u32 add_import(std::string name) {
    return add_symbol(std::move(name), binding::imported, kUndefinedSection, 0);
  }

  void add_reloc(u32 sec, u64 offset, reloc_kind kind, u32 target,
                 i64 addend = 0) {
    img_.relocations.push_back(relocation{sec, offset, kind, target, addend});
  }

  void add_export(std::string name) { img_.exports.push_back(std::move(name)); }

  void set_update_hook(std::string name) { img_.update_hook = std::move(name); }

  /// Access to the partially built image (tests mutate it to break rules).
  module_image& raw() { return img_; }
  const module_image& raw() const { return img_; }

  module_image build() const {
    validate(img_);
    return img_;
  }

 private:
  module_image img_;
};

// -- serialization (ADLM) ---------------------------------------------------

namespace detail {

struct writer {
  std::vector<u8> out;

  void raw(const void* p, size_t n) {
    const u8* b = static_cast<const u8*>(p);
    out.insert(out.end(), b, b + n);
  }
  void put_u8(u8 v) { out.push_back(v); }
  void put_u16(u16 v) { raw(&v, 2); }
  void put_u32(u32 v) { raw(&v, 4); }
  void put_u64(u64 v) { raw(&v, 8); }
  void put_str(const std::string& s) {
    put_u32(static_cast<u32>(s.size()));
    raw(s.data(), s.size());
  }
};

struct reader {
  const u8* p;
  size_t left;

  void raw(void* dst, size_t n) {
    if (n > left) throw malformed_image("truncated image");
    std::memcpy(dst, p, n);
    p += n;
    left -= n;
  }
  u8 get_u8() { u8 v; raw(&v, 1); return v; }
  u16 get_u16() { u16 v; raw(&v, 2); return v; }
  u32 get_u32() { u32 v; raw(&v, 4); return v; }
  u64 get_u64() { u64 v; raw(&v, 8); return v; }
  std::string get_str() {
    u32 n = get_u32();
    if (n > left) throw malformed_image("truncated string");
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    left -= n;
    return s;
  }
};

}  // namespace detail

inline constexpr char kMagic[4] = {'A', 'D', 'L', 'M'};
inline constexpr u16 kVersion = 1;

inline std::vector<u8> serialize(const module_image& m) {
  detail::writer w;
  w.raw(kMagic, 4);
  w.put_u16(kVersion);
  w.put_str(m.name);

  w.put_u32(static_cast<u32>(m.sections.size()));
  for (const section& s : m.sections) {
    w.put_str(s.name);
    w.put_u8(static_cast<u8>(s.where));
    w.put_u8(static_cast<u8>(s.kind));
    w.put_u32(s.align);
    w.put_u64(s.bytes.size());
    w.raw(s.bytes.data(), s.bytes.size());
  }

  w.put_u32(static_cast<u32>(m.symbols.size()));
  for (const symbol& s : m.symbols) {
    w.put_str(s.name);
    w.put_u8(static_cast<u8>(s.bind));
    w.put_u32(s.section);
    w.put_u64(s.offset);
  }

  w.put_u32(static_cast<u32>(m.relocations.size()));
  for (const relocation& r : m.relocations) {
    w.put_u32(r.section);
    w.put_u64(r.offset);
    w.put_u8(static_cast<u8>(r.kind));
    w.put_u32(r.target);
    w.put_u64(static_cast<u64>(r.addend));
  }

  w.put_u32(static_cast<u32>(m.exports.size()));
  for (const std::string& e : m.exports) w.put_str(e);

  w.put_u8(m.update_hook ? 1 : 0);
  if (m.update_hook) w.put_str(*m.update_hook);
  return std::move(w.out);
}

inline module_image parse(const std::vector<u8>& bytes) {
  detail::reader r{bytes.data(), bytes.size()};
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw malformed_image("bad magic");
  if (r.get_u16() != kVersion) throw malformed_image("unsupported version");

  module_image m;
  m.name = r.get_str();

  const u32 nsec = r.get_u32();
  for (u32 i = 0; i < nsec; ++i) {
    section s;
    s.name = r.get_str();
    const u8 where = r.get_u8();
    const u8 kind = r.get_u8();
    if (where > 1 || kind > 3) throw malformed_image("bad section enum");
    s.where = static_cast<part>(where);
    s.kind = static_cast<section_kind>(kind);
    s.align = r.get_u32();
    const u64 len = r.get_u64();
    if (len > r.left) throw malformed_image("truncated section bytes");
    s.bytes.resize(len);
    r.raw(s.bytes.data(), len);
    m.sections.push_back(std::move(s));
  }

  const u32 nsym = r.get_u32();
  for (u32 i = 0; i < nsym; ++i) {
    symbol s;
    s.name = r.get_str();
    const u8 bind = r.get_u8();
    if (bind > 2) throw malformed_image("bad binding");
    s.bind = static_cast<binding>(bind);
    s.section = r.get_u32();
    if (s.section != kUndefinedSection && s.section >= m.sections.size())
      throw malformed_image("symbol section index out of range");
    s.offset = r.get_u64();
    m.symbols.push_back(std::move(s));
  }

  const u32 nrel = r.get_u32();
  for (u32 i = 0; i < nrel; ++i) {
    relocation rel;
    rel.section = r.get_u32();
    if (rel.section >= m.sections.size())
      throw malformed_image("relocation section index out of range");
    rel.offset = r.get_u64();
    const u8 kind = r.get_u8();
    if (kind > 4) throw malformed_image("bad relocation kind");
    rel.kind = static_cast<reloc_kind>(kind);
    rel.target = r.get_u32();
    if (rel.target >= m.symbols.size())
      throw malformed_image("relocation target index out of range");
    rel.addend = static_cast<i64>(r.get_u64());
    m.relocations.push_back(rel);
  }

  const u32 nexp = r.get_u32();
  for (u32 i = 0; i < nexp; ++i) m.exports.push_back(r.get_str());

  if (r.get_u8() != 0) m.update_hook = r.get_str();
  if (r.left != 0) throw malformed_image("trailing bytes");
  return m;
}

}  // namespace rerand::modfmt
