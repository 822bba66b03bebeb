"""Meta-compilation driver: handler definitions to a JIT frontend.

Runs translation, the optimization pipeline and generator emission for
every opcode entry and primitive, then assembles the dispatch table.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

from . import bytecodes as bc
from . import handler_lang as hl
from .backend import GenError, GeneratorProgram, emit_generator, handler_flags, listing
from .frontend import translate_all
from .jit import Frontend
from .midend import run_pipeline

MAGIC = b"DRU1"
FORMAT_VERSION = 1
FALLBACK = "interpretFallback"


@dataclass(frozen=True)
class TableEntry:
    opcode: int
    handler: str
    generator: str             # generator name, FALLBACK or bc.UNKNOWN
    flags: frozenset
    stack_delta: int | None

    def describe(self) -> str:
        flags = " ".join(f"#{f}" for f in sorted(self.flags))
        delta = "" if self.stack_delta is None else f" delta {self.stack_delta:+d}"
        return f"0x{self.opcode:02X} {self.handler} -> {self.generator}{delta} {flags}".rstrip()


def _opcode_flags(d: hl.HandlerDef | None, opcode: int) -> frozenset:
    flags = set(handler_flags(d))
    if bc.JUMP_TRUE_FIRST <= opcode <= bc.JUMP_FALSE_LAST:
        flags.add("branch")
        flags.add("isBranchTrue" if opcode <= bc.JUMP_TRUE_LAST else "isBranchFalse")
    return frozenset(flags)


def emit_bytecode_table(vmdef: hl.VMDefinition, generators: dict) -> tuple[TableEntry, ...]:
    """One entry per opcode; missing generators map to the fallback marker."""
    table = []
    for info in bc.OPCODES:
        d = vmdef.handlers.get(info.handler)
        if info.handler == bc.UNKNOWN or d is None:
            table.append(TableEntry(info.opcode, bc.UNKNOWN, bc.UNKNOWN, frozenset(), None))
            continue
        gen = generators.get(info.opcode)
        name = gen.name if gen is not None else FALLBACK
        table.append(TableEntry(info.opcode, info.handler, name, _opcode_flags(d, info.opcode),
                                d.annotations.needsFrameNever))
    return tuple(table)


@dataclass
class MetaResult:
    frontend: Frontend
    table: tuple
    irs: dict
    prim_irs: dict
    failures: dict


_CACHE: dict = {}


def meta_compile(vmdef: hl.VMDefinition | None = None, inject_fault: bool = False) -> MetaResult:
    """Build the generated frontend (cached per definition object)."""
    vmdef = vmdef or hl.builtin_vm_definition()
    key = (id(vmdef), inject_fault)
    if key in _CACHE:
        return _CACHE[key]
    irs, prim_irs, failures = translate_all(vmdef)
    gens, prims, prim_meta = {}, {}, {}
    for opcode, ir in irs.items():
        run_pipeline(ir)
        d = vmdef.handler_for_opcode(opcode)
        try:
            gens[opcode] = emit_generator(ir, handler_flags(d))
        except GenError as exc:
            failures[ir.name] = f"{type(exc).__name__}: {exc}"
    for pid, ir in prim_irs.items():
        run_pipeline(ir)
        try:
            gp = emit_generator(ir)
        except GenError as exc:
            failures[ir.name] = f"{type(exc).__name__}: {exc}"
            continue
        if inject_fault and pid == 1:
            gp = _inject_add_fault(gp)
        prims[pid] = gp
        prim_meta[pid] = {"numArgs": ir.meta.get("numArgs"), "guardClass": ir.meta.get("guardClass")}
    table = emit_bytecode_table(vmdef, gens)
    fallbacks = {e.opcode: failures.get(f"{e.handler}@{e.opcode:#04x}", bc.UNKNOWN)
                 for e in table if e.opcode not in gens}
    fe = Frontend("druid", gens, prims, {e.opcode: e.flags for e in table}, prim_meta, fallbacks)
    result = MetaResult(fe, table, irs, prim_irs, failures)
    _CACHE[key] = result
    return result


def druid_frontend(inject_fault: bool = False) -> Frontend:
    return meta_compile(inject_fault=inject_fault).frontend


def _inject_add_fault(gp: GeneratorProgram) -> GeneratorProgram:
    """Mutant used to check that differential testing notices wrong code:
    the untagging constant of ``AddCqR`` is off by one."""
    def mutate(ops):
        out = []
        for op in ops:
            if op[0] == "rtl" and op[1] == "AddCqR" and op[2] == ("imm", -1):
                op = ("rtl", "AddCqR", ("imm", 0), *op[3:])
            elif op[0] == "stagedIf":
                op = ("stagedIf", op[1], mutate(op[2]), mutate(op[3]))
            elif op[0] == "stagedLoop":
                op = ("stagedLoop", mutate(op[1]), op[2], mutate(op[3]))
            out.append(op)
        return out
    return GeneratorProgram(gp.name, gp.kind, mutate(gp.ops), dict(gp.meta))


# ---------------------------------------------------------------------------
# frontend.bin: magic, version, then length-prefixed JSON records

def _to_json(x):
    if isinstance(x, tuple):
        return {"t": [_to_json(e) for e in x]}
    if isinstance(x, list):
        return [_to_json(e) for e in x]
    return x


def _from_json(x):
    if isinstance(x, dict):
        return tuple(_from_json(e) for e in x["t"])
    if isinstance(x, list):
        return [_from_json(e) for e in x]
    return x


def _record(buf: io.BytesIO, payload: dict):
    data = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def encode_frontend(fe: Frontend) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(fe.bytecodes) + len(fe.primitives)))
    for key, gp in sorted(fe.bytecodes.items()):
        _record(buf, {"kind": "bytecode", "key": key, "name": gp.name,
                      "ops": _to_json(gp.ops), "flags": sorted(fe.flags.get(key, ()))})
    for key, gp in sorted(fe.primitives.items()):
        _record(buf, {"kind": "primitive", "key": key, "name": gp.name,
                      "ops": _to_json(gp.ops), "meta": fe.prim_meta.get(key, {})})
    return buf.getvalue()


def decode_frontend(data: bytes, name: str = "druid") -> Frontend:
    if data[:4] != MAGIC:
        raise ValueError("not a frontend file")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported frontend version {version}")
    pos = 10
    fe = Frontend(name, {}, {})
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        rec = json.loads(data[pos + 4:pos + 4 + n])
        pos += 4 + n
        gp = GeneratorProgram(rec["name"], rec["kind"], _from_json(rec["ops"]))
        if rec["kind"] == "bytecode":
            fe.bytecodes[rec["key"]] = gp
            fe.flags[rec["key"]] = frozenset(rec["flags"])
        else:
            fe.primitives[rec["key"]] = gp
            fe.prim_meta[rec["key"]] = rec["meta"]
    return fe


def frontend_listing(fe: Frontend) -> str:
    parts = [listing(gp) for _, gp in sorted(fe.bytecodes.items())]
    parts += [listing(gp) for _, gp in sorted(fe.primitives.items())]
    return "\n".join(parts)


def table_dump(table) -> str:
    return "\n".join(e.describe() for e in table) + "\n"
