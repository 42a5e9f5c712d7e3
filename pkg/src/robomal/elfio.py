"""Minimal ELF64 reading and writing.

Scope is deliberately narrow: locate named sections in 64-bit little-endian
ELF images and pull their bytes out, plus emit minimal well-formed images
for the synthetic corpus (header, 8-byte-aligned section contents, a section
header string table, and the section header table; no program headers, since
nothing here ever executes the files). ELF32 and big-endian images are
rejected with a distinct error so third-party files fail loudly instead of
misparsing.

All offsets are validated against the image before any read, so arbitrary
mutated input produces an exception, never an out-of-range access.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

ELF_MAGIC = b"\x7fELF"
EHDR_SIZE = 64
SHDR_SIZE = 64
SHT_NULL = 0
SHT_PROGBITS = 1
SHT_STRTAB = 3
SHT_NOBITS = 8


class MalformedImage(ValueError):
    """Structurally invalid ELF image."""


class UnsupportedImage(ValueError):
    """Valid-looking ELF that is not 64-bit little-endian."""


class SectionNotFound(KeyError):
    """Requested section name absent; message lists what exists."""


class RangeError(ValueError):
    """Raw extraction offset outside the image."""


@dataclass(frozen=True)
class Section:
    name: str
    file_offset: int
    size: int
    data: bytes
    sh_type: int = SHT_PROGBITS


@dataclass(frozen=True)
class ElfFile:
    shoff: int
    shnum: int
    shstrndx: int
    sections: tuple[Section, ...]

    def section(self, name: str) -> Section:
        for sec in self.sections:
            if sec.name == name:
                return sec
        available = ", ".join(repr(s.name) for s in self.sections) or "none"
        raise SectionNotFound(f"no section {name!r}; available: {available}")


@dataclass(frozen=True)
class ElfBuildSpec:
    """Named sections to embed, in order; `payload_section` marks the one
    carrying controller bytes (informational, all sections round-trip)."""
    sections: tuple[tuple[str, bytes], ...] = field(default_factory=tuple)
    payload_section: str = ".pydata"


def _read_struct(image: bytes, fmt: str, offset: int):
    try:
        return struct.unpack_from(fmt, image, offset)
    except struct.error as exc:
        raise MalformedImage(f"truncated read at offset {offset}: {exc}") from exc


def _read_name(strtab: bytes, name_off: int) -> str:
    if name_off >= len(strtab):
        raise MalformedImage(f"section name offset {name_off} outside string table")
    end = strtab.find(b"\x00", name_off)
    if end < 0:
        raise MalformedImage("unterminated section name in string table")
    try:
        return strtab[name_off:end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedImage(f"undecodable section name: {exc}") from exc


def parse_elf(image: bytes) -> ElfFile:
    """Parse an ELF64 little-endian image and extract every section."""
    if len(image) < EHDR_SIZE:
        raise MalformedImage(f"image of {len(image)} bytes is shorter than an ELF64 header")
    if image[:4] != ELF_MAGIC:
        raise MalformedImage("bad magic; not an ELF image")
    ei_class, ei_data = image[4], image[5]
    if ei_class != 2:
        raise UnsupportedImage(f"only ELF64 supported (EI_CLASS {ei_class})")
    if ei_data != 1:
        raise UnsupportedImage(f"only little-endian supported (EI_DATA {ei_data})")
    (shoff,) = _read_struct(image, "<Q", 0x28)
    shentsize, shnum, shstrndx = _read_struct(image, "<HHH", 0x3A)
    if shnum == 0:
        return ElfFile(shoff=shoff, shnum=0, shstrndx=0, sections=())
    if shentsize != SHDR_SIZE:
        raise MalformedImage(f"section header entry size {shentsize}, expected {SHDR_SIZE}")
    table_end = shoff + shnum * SHDR_SIZE
    if shoff < EHDR_SIZE or table_end > len(image):
        raise MalformedImage(
            f"section header table [{shoff}, {table_end}) outside image of {len(image)} bytes")
    if shstrndx >= shnum:
        raise MalformedImage(f"string table index {shstrndx} >= section count {shnum}")

    raw = []
    for i in range(shnum):
        base = shoff + i * SHDR_SIZE
        name_off, sh_type = _read_struct(image, "<II", base)
        sh_offset, sh_size = _read_struct(image, "<QQ", base + 0x18)
        if sh_type != SHT_NOBITS and sh_size > 0 and sh_offset + sh_size > len(image):
            raise MalformedImage(
                f"section {i} range [{sh_offset}, {sh_offset + sh_size}) outside image")
        raw.append((name_off, sh_type, sh_offset, sh_size))

    str_off, str_size = raw[shstrndx][2], raw[shstrndx][3]
    if raw[shstrndx][1] != SHT_STRTAB:
        raise MalformedImage(f"section {shstrndx} is not a string table")
    strtab = image[str_off:str_off + str_size]

    sections = []
    for name_off, sh_type, sh_offset, sh_size in raw:
        name = _read_name(strtab, name_off)
        data = b"" if sh_type == SHT_NOBITS else image[sh_offset:sh_offset + sh_size]
        sections.append(Section(name=name, file_offset=sh_offset, size=sh_size,
                                data=data, sh_type=sh_type))
    return ElfFile(shoff=shoff, shnum=shnum, shstrndx=shstrndx, sections=tuple(sections))


def extract_section(elf: ElfFile, name: str) -> bytes:
    return elf.section(name).data


def extract_range(image: bytes, offset: int, length: int) -> bytes:
    """Byte range extraction for files where only a start address is known.

    The length is clamped to the end of the image; an offset past the end is
    an error rather than an empty result.
    """
    if offset < 0 or length < 0:
        raise RangeError(f"negative offset or length ({offset}, {length})")
    if offset > len(image):
        raise RangeError(f"offset {offset} beyond image of {len(image)} bytes")
    return image[offset:offset + length]


def _align8(n: int) -> int:
    return (n + 7) & ~7


def build_elf(spec: ElfBuildSpec) -> bytes:
    """Emit a minimal ELF64 little-endian image that parse_elf round-trips."""
    names = [name for name, _ in spec.sections]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate section names: {dupes}")
    for name in names:
        if "\x00" in name or name == "":
            raise ValueError(f"invalid section name {name!r}")

    strtab = bytearray(b"\x00")
    name_offsets = {}
    for name in [*names, ".shstrtab"]:
        name_offsets[name] = len(strtab)
        strtab += name.encode("utf-8") + b"\x00"

    # layout: header | contents (8-aligned) | shstrtab | headers (8-aligned)
    image = bytearray(EHDR_SIZE)
    offsets = {}
    for name, content in spec.sections:
        pos = _align8(len(image))
        image += b"\x00" * (pos - len(image))
        offsets[name] = pos
        image += content
    str_pos = _align8(len(image))
    image += b"\x00" * (str_pos - len(image))
    image += strtab
    shoff = _align8(len(image))
    image += b"\x00" * (shoff - len(image))

    def shdr(name_off, sh_type, offset, size):
        return struct.pack("<IIQQQQIIQQ", name_off, sh_type, 0, 0, offset, size, 0, 0, 0, 0)

    shnum = len(spec.sections) + 2
    image += shdr(0, SHT_NULL, 0, 0)
    for name, content in spec.sections:
        image += shdr(name_offsets[name], SHT_PROGBITS, offsets[name], len(content))
    image += shdr(name_offsets[".shstrtab"], SHT_STRTAB, str_pos, len(strtab))

    header = struct.pack(
        "<4sBBBBB7xHHIQQQIHHHHHH",
        ELF_MAGIC, 2, 1, 1, 0, 0,       # class=ELF64, data=LE, version, osabi, abiversion
        2, 62, 1,                        # e_type=EXEC, e_machine=x86-64, e_version
        0, 0, shoff,                     # entry (unused), phoff, shoff
        0, EHDR_SIZE, 0, 0,              # flags, ehsize, phentsize, phnum
        SHDR_SIZE, shnum, shnum - 1)     # shentsize, shnum, shstrndx
    image[:EHDR_SIZE] = header
    return bytes(image)
