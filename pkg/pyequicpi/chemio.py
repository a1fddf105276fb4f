"""
構造ファイル入出力モジュール

PDB（タンパク質）と V2000 SDF（リガンド、複数ポーズ可）を不変なデータクラスへ変換し、
データセットのマニフェスト CSV から :class:`ComplexRecord` を組み立てる。
"""
import math
import os
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
import numpy as np
import pandas as pd
from pyequicpi.helper import SysLog, ParseError, EmptyStructureError, ValidationError

logger = SysLog.logger

Vector3 = Tuple[float, float, float]

# index + 1 == atomic number
ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br Kr "
    "Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb "
    "Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf "
    "Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og"
).split()
ATOMIC_NUMBER: Dict[str, int] = {symbol: number for number, symbol in enumerate(ELEMENTS, start=1)}
HYDROGEN_SYMBOLS = ("H", "D", "T")

AMINO_ACIDS: Dict[str, str] = {
    "ALA": "A",
    "ARG": "R",
    "ASN": "N",
    "ASP": "D",
    "CYS": "C",
    "GLN": "Q",
    "GLU": "E",
    "GLY": "G",
    "HIS": "H",
    "ILE": "I",
    "LEU": "L",
    "LYS": "K",
    "MET": "M",
    "PHE": "F",
    "PRO": "P",
    "SER": "S",
    "THR": "T",
    "TRP": "W",
    "TYR": "Y",
    "VAL": "V",
}
UNKNOWN_RESIDUE = "UNK"
RESIDUE_CLASSES: Tuple[str, ...] = tuple(sorted(AMINO_ACIDS)) + (UNKNOWN_RESIDUE,)

# V2000 atom block charge field
_SDF_CHARGE_CODES = {0: 0, 1: 3, 2: 2, 3: 1, 4: 0, 5: -1, 6: -2, 7: -3}
_SDF_CHARGE_FIELDS = {charge: code for code, charge in _SDF_CHARGE_CODES.items() if code != 4}
# V2000 property block line prefixes
_SDF_PROPERTY_PREFIXES = ("M  ", "A  ", "V  ", "G  ", "S  SKP")


class BondOrder(IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4


@dataclass(frozen=True)
class Residue:
    """Cα で代表させたタンパク質残基"""

    aa: str
    """3文字コード（標準20種 または UNK）"""
    chain: str
    seq_index: int
    ca_position: Vector3
    """Å"""


@dataclass(frozen=True)
class ProteinAtom:
    """ATOM レコード由来の重原子（物理スコア計算用）"""

    name: str
    element: str
    residue_name: str
    chain: str
    seq_index: int
    position: Vector3


@dataclass(frozen=True)
class ProteinStructure:
    """タンパク質構造

    Args:
        id(str): 構造ID
        residues(Tuple[Residue]): (chain, seq_index) 順に並んだ残基
        atoms(Tuple[ProteinAtom]): 全ての重原子（水素除く）
    """

    id: str
    residues: Tuple[Residue, ...]
    atoms: Tuple[ProteinAtom, ...] = ()

    def __post_init__(self):
        if len(self.residues) == 0:
            raise EmptyStructureError(f"Protein {self.id} has no residues.")
        keys = set()
        for residue in self.residues:
            if not all(math.isfinite(c) for c in residue.ca_position):
                raise ValidationError(f"Non-finite CA position at {residue.chain}{residue.seq_index}")
            key = (residue.chain, residue.seq_index)
            if key in keys:
                raise ValidationError(f"Duplicate residue {residue.chain}{residue.seq_index}")
            keys.add(key)

    @property
    def ca_positions(self) -> np.ndarray:
        return np.array([r.ca_position for r in self.residues], dtype=np.float64)

    @property
    def sequence(self) -> str:
        """1文字コード配列（UNK は X）"""
        return "".join(AMINO_ACIDS.get(r.aa, "X") for r in self.residues)

    @property
    def atom_positions(self) -> np.ndarray:
        return np.array([a.position for a in self.atoms], dtype=np.float64).reshape(-1, 3)


@dataclass(frozen=True)
class Atom:
    element: str
    position: Vector3
    formal_charge: int = 0
    aromatic: bool = False


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    order: BondOrder = BondOrder.SINGLE


@dataclass(frozen=True)
class LigandMolecule:
    """重原子のみのリガンド（1ポーズ）

    Args:
        id(str): 分子名（SDF の1行目）
        atoms(Tuple[Atom]): 重原子
        bonds(Tuple[Bond]): 重原子間の結合（インデックスは atoms に対応）
        properties(Dict[str, str]): SDF データ項目 ``> <name>``
    """

    id: str
    atoms: Tuple[Atom, ...]
    bonds: Tuple[Bond, ...] = ()
    properties: Dict[str, str] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        seen = set()
        n = len(self.atoms)
        for atom in self.atoms:
            if atom.element in HYDROGEN_SYMBOLS:
                raise ValidationError(f"Ligand {self.id}: hydrogen atoms must be removed.")
            if not all(math.isfinite(c) for c in atom.position):
                raise ValidationError(f"Ligand {self.id}: non-finite atom position.")
        for bond in self.bonds:
            if not (0 <= bond.i < n and 0 <= bond.j < n) or bond.i == bond.j:
                raise ValidationError(f"Ligand {self.id}: invalid bond ({bond.i}, {bond.j}).")
            key = (min(bond.i, bond.j), max(bond.i, bond.j))
            if key in seen:
                raise ValidationError(f"Ligand {self.id}: duplicate bond {key}.")
            seen.add(key)

    @property
    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.atoms], dtype=np.float64).reshape(-1, 3)

    def neighbors(self) -> List[List[Tuple[int, BondOrder]]]:
        """原子ごとの (隣接原子, 結合次数) リスト"""
        table: List[List[Tuple[int, BondOrder]]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            table[bond.i].append((bond.j, bond.order))
            table[bond.j].append((bond.i, bond.order))
        return table

    def degree(self, index: int) -> int:
        return sum(1 for bond in self.bonds if index in (bond.i, bond.j))

    @property
    def confidence(self) -> Optional[float]:
        """SDF データ項目 ``confidence`` （上流ドッキングの信頼度）"""
        if "confidence" not in self.properties:
            return None
        return float(self.properties["confidence"])


@dataclass(frozen=True)
class ComplexRecord:
    """ドッキング済み複合体1件

    Args:
        complex_id(str): ID
        ligand(LigandMolecule): グラフ化に用いるポーズ
        protein(ProteinStructure): 受容体
        label_ec50_nm(float): EC50 (nM)。ラベル無しは None
        upstream_confidence(float): 上流モデルの信頼度 [0, 1]
        is_active(bool): スクリーニングの活性ラベル
        poses(Tuple[LigandMolecule]): SDF 中の全ポーズ（再ランキング用）
    """

    complex_id: str
    ligand: LigandMolecule
    protein: ProteinStructure
    label_ec50_nm: Optional[float] = None
    upstream_confidence: Optional[float] = None
    is_active: Optional[bool] = None
    poses: Tuple[LigandMolecule, ...] = ()

    def __post_init__(self):
        if self.label_ec50_nm is not None and not (self.label_ec50_nm > 0 and math.isfinite(self.label_ec50_nm)):
            raise ValidationError(f"{self.complex_id}: ec50_nm must be positive, got {self.label_ec50_nm}")
        if self.upstream_confidence is not None and not (0.0 <= self.upstream_confidence <= 1.0):
            raise ValidationError(f"{self.complex_id}: confidence must be within [0, 1]")
        if len(self.poses) == 0:
            object.__setattr__(self, "poses", (self.ligand,))


def _decode(text: Union[bytes, str]) -> str:
    if isinstance(text, bytes):
        return text.decode("utf-8", errors="replace")
    return text


def _pdb_float(line: str, start: int, stop: int, lineno: int, name: str) -> float:
    raw = line[start:stop]
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(f"malformed {name} coordinate field {raw!r}", line=lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite {name} coordinate {raw!r}", line=lineno)
    return value


def _pdb_element(line: str, atom_name: str) -> str:
    element = line[76:78].strip() if len(line) >= 78 else ""
    if not element:
        letters = "".join(c for c in atom_name if c.isalpha())
        element = letters[:1]
    return element.capitalize()


def parse_pdb(text: Union[bytes, str], structure_id: str = "protein") -> ProteinStructure:
    """PDB テキストから残基（Cα）と重原子を取り出す

    ATOM レコードのみ対象。同一 (chain, resSeq) では最初に現れた残基（挿入コード・altLoc とも先勝ち）を採用する。

    Raises:
        ParseError: 座標欄の書式不正（行番号付き）
        EmptyStructureError: CA 原子が一つも無い
    """
    residues: Dict[Tuple[str, int], Residue] = {}
    residue_identity: Dict[Tuple[str, int], Tuple[str, str]] = {}
    atoms: Dict[Tuple[str, int, str], ProteinAtom] = {}
    for lineno, line in enumerate(_decode(text).splitlines(), start=1):
        if not line.startswith("ATOM"):
            continue
        if len(line) < 54:
            raise ParseError("ATOM record too short for coordinates", line=lineno)
        atom_name = line[12:16].strip()
        residue_name = line[17:20].strip()
        chain = line[21]
        insertion_code = line[26]
        try:
            seq_index = int(line[22:26])
        except ValueError:
            raise ParseError(f"malformed resSeq field {line[22:26]!r}", line=lineno) from None
        x = _pdb_float(line, 30, 38, lineno, "x")
        y = _pdb_float(line, 38, 46, lineno, "y")
        z = _pdb_float(line, 46, 54, lineno, "z")

        key = (chain, seq_index)
        identity = (residue_name, insertion_code)
        if residue_identity.setdefault(key, identity) != identity:
            # insertion code residue sharing chain + resSeq
            continue
        element = _pdb_element(line, atom_name)
        if element in HYDROGEN_SYMBOLS:
            continue
        atom_key = (chain, seq_index, atom_name)
        if atom_key in atoms:
            # later alternate location
            continue
        aa = residue_name if residue_name in AMINO_ACIDS else UNKNOWN_RESIDUE
        atoms[atom_key] = ProteinAtom(
            name=atom_name, element=element, residue_name=residue_name, chain=chain, seq_index=seq_index, position=(x, y, z)
        )
        if atom_name == "CA" and key not in residues:
            if aa == UNKNOWN_RESIDUE:
                logger.debug(f"{structure_id}: residue {residue_name} {chain}{seq_index} mapped to UNK")
            residues[key] = Residue(aa=aa, chain=chain, seq_index=seq_index, ca_position=(x, y, z))

    if len(residues) == 0:
        raise EmptyStructureError(f"{structure_id}: no CA atoms found in ATOM records.")
    ordered = tuple(residues[k] for k in sorted(residues))
    unknown = sum(1 for r in ordered if r.aa == UNKNOWN_RESIDUE)
    if unknown:
        logger.warning(f"{structure_id}: {unknown} non-standard residue(s) mapped to UNK")
    return ProteinStructure(id=structure_id, residues=ordered, atoms=tuple(atoms.values()))


def _parse_int(raw: str, lineno: int, name: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ParseError(f"malformed {name} field {raw!r}", line=lineno) from None


def _sdf_int(line: str, start: int, stop: int, lineno: int, name: str, default: Optional[int] = None) -> int:
    raw = line[start:stop].strip()
    if raw == "" and default is not None:
        return default
    return _parse_int(raw, lineno, name)


def _is_block_terminator(line: str) -> bool:
    return line.startswith(_SDF_PROPERTY_PREFIXES) or line.startswith(">") or line.strip() == ""


def _parse_sdf_record(lines: Sequence[str], offset: int, record_index: int) -> LigandMolecule:
    """1レコード分の解析。 ``offset`` はファイル先頭からの行オフセット（エラー表示用）"""
    if len(lines) < 4:
        raise ParseError("truncated header block", line=offset + len(lines))
    counts = lines[3]
    if "V3000" in counts:
        raise ParseError("V3000 connection tables are not supported", line=offset + 4)
    n_atoms = _sdf_int(counts, 0, 3, offset + 4, "atom count")
    n_bonds = _sdf_int(counts, 3, 6, offset + 4, "bond count")
    name = lines[0].strip() or f"mol{record_index}"

    atom_lines = lines[4 : 4 + n_atoms]
    if len(atom_lines) < n_atoms or any(_is_block_terminator(line) for line in atom_lines):
        raise ParseError(f"counts line declares {n_atoms} atoms but the atom block is shorter", line=offset + 4)
    raw_atoms = []
    for k, line in enumerate(atom_lines):
        lineno = offset + 5 + k
        try:
            x, y, z = float(line[0:10]), float(line[10:20]), float(line[20:30])
        except ValueError:
            raise ParseError("malformed atom coordinates", line=lineno) from None
        symbol = line[31:34].strip()
        if symbol not in ATOMIC_NUMBER and symbol not in HYDROGEN_SYMBOLS:
            raise ParseError(f"unknown element symbol {symbol!r}", line=lineno)
        code = _sdf_int(line, 36, 39, lineno, "charge", default=0)
        raw_atoms.append([symbol, (x, y, z), _SDF_CHARGE_CODES.get(code, 0)])

    bond_start = 4 + n_atoms
    bond_lines = lines[bond_start : bond_start + n_bonds]
    if len(bond_lines) < n_bonds or any(_is_block_terminator(line) for line in bond_lines):
        raise ParseError(f"counts line declares {n_bonds} bonds but the bond block is shorter", line=offset + 4)
    tail = lines[bond_start + n_bonds :]
    if len(tail) > 0 and not _is_block_terminator(tail[0]):
        raise ParseError("more atom/bond lines than the counts line declares", line=offset + bond_start + n_bonds + 1)

    raw_bonds = []
    for k, line in enumerate(bond_lines):
        lineno = offset + bond_start + 1 + k
        i = _sdf_int(line, 0, 3, lineno, "bond atom 1") - 1
        j = _sdf_int(line, 3, 6, lineno, "bond atom 2") - 1
        order = _sdf_int(line, 6, 9, lineno, "bond type")
        if not (0 <= i < n_atoms and 0 <= j < n_atoms) or i == j:
            raise ParseError(f"bond endpoints ({i + 1}, {j + 1}) out of range", line=lineno)
        if order not in (1, 2, 3, 4):
            raise ParseError(f"unsupported bond type {order}", line=lineno)
        raw_bonds.append((i, j, BondOrder(order)))

    properties: Dict[str, str] = {}
    charge_override: Dict[int, int] = {}
    tail_start = offset + bond_start + n_bonds + 1
    in_properties = True
    k = 0
    while k < len(tail):
        line = tail[k]
        lineno = tail_start + k
        if in_properties and line.startswith("M  END"):
            in_properties = False
        elif in_properties and line.startswith(("A  ", "G  ")):
            # alias and group lines carry one text line
            k += 1
        elif in_properties and line.startswith("S  SKP"):
            k += _sdf_int(line, 6, 9, lineno, "skip count")
        elif in_properties and line.startswith("M  CHG"):
            count = _sdf_int(line, 6, 9, lineno, "charge count")
            entries = line[9:].split()
            if len(entries) < 2 * count:
                raise ParseError(f"M  CHG declares {count} entries but holds {len(entries) // 2}", line=lineno)
            for n in range(count):
                index = _parse_int(entries[2 * n], lineno, "charge atom") - 1
                charge_override[index] = _parse_int(entries[2 * n + 1], lineno, "charge value")
        elif line.startswith(">"):
            start, stop = line.find("<"), line.find(">", line.find("<") + 1)
            key = line[start + 1 : stop] if 0 <= start < stop else line[1:].strip()
            values = []
            k += 1
            while k < len(tail) and tail[k].strip() != "":
                values.append(tail[k])
                k += 1
            properties[key] = "\n".join(values)
        k += 1
    if charge_override:
        # M  CHG supersedes the atom block charge field
        for atom in raw_atoms:
            atom[2] = 0
        for index, charge in charge_override.items():
            if 0 <= index < n_atoms:
                raw_atoms[index][2] = charge

    # strip hydrogens and remap bond indices
    remap: Dict[int, int] = {}
    for old, atom in enumerate(raw_atoms):
        if atom[0] not in HYDROGEN_SYMBOLS:
            remap[old] = len(remap)
    aromatic_atoms = set()
    bonds: List[Bond] = []
    seen = set()
    for i, j, order in raw_bonds:
        if i not in remap or j not in remap:
            continue
        key = (min(remap[i], remap[j]), max(remap[i], remap[j]))
        if key in seen:
            raise ParseError(f"duplicate bond between atoms {i + 1} and {j + 1}", line=offset + 4)
        seen.add(key)
        if order == BondOrder.AROMATIC:
            aromatic_atoms.update(key)
        bonds.append(Bond(i=remap[i], j=remap[j], order=order))
    atoms = tuple(
        Atom(element=raw_atoms[old][0], position=raw_atoms[old][1], formal_charge=raw_atoms[old][2], aromatic=new in aromatic_atoms)
        for old, new in remap.items()
    )
    return LigandMolecule(id=name, atoms=atoms, bonds=tuple(bonds), properties=properties)


def parse_sdf(text: Union[bytes, str]) -> List[LigandMolecule]:
    """V2000 SDF の全レコードを解析する（``$$$$`` 区切り）

    Raises:
        ParseError: 原子数・結合数と counts 行の不一致、未知の元素記号など
    """
    lines = _decode(text).splitlines()
    molecules: List[LigandMolecule] = []
    record: List[str] = []
    offset = 0
    for lineno, line in enumerate(lines):
        if line.strip() == "$$$$":
            molecules.append(_parse_sdf_record(record, offset, len(molecules)))
            record = []
            offset = lineno + 1
        else:
            record.append(line)
    if any(line.strip() for line in record):
        molecules.append(_parse_sdf_record(record, offset, len(molecules)))
    logger.debug(f"parsed {len(molecules)} SDF record(s)")
    return molecules


def write_sdf(molecules: Iterable[LigandMolecule]) -> str:
    """V2000 SDF 文字列を生成する（座標は小数4桁）"""
    out: List[str] = []
    for mol in molecules:
        out.append(mol.id)
        out.append("  pyequicpi")
        out.append("")
        out.append(f"{len(mol.atoms):3d}{len(mol.bonds):3d}  0  0  0  0  0  0  0  0999 V2000")
        for atom in mol.atoms:
            x, y, z = atom.position
            code = _SDF_CHARGE_FIELDS.get(atom.formal_charge, 0)
            out.append(f"{x:10.4f}{y:10.4f}{z:10.4f} {atom.element:<3s} 0{code:3d}  0  0  0  0  0  0  0  0  0  0")
        for bond in mol.bonds:
            out.append(f"{bond.i + 1:3d}{bond.j + 1:3d}{int(bond.order):3d}  0")
        charged = [(k + 1, a.formal_charge) for k, a in enumerate(mol.atoms) if a.formal_charge != 0]
        for start in range(0, len(charged), 8):
            chunk = charged[start : start + 8]
            out.append(f"M  CHG{len(chunk):3d}" + "".join(f" {k:3d} {c:3d}" for k, c in chunk))
        out.append("M  END")
        for key, value in mol.properties.items():
            out.append(f">  <{key}>")
            out.append(value)
            out.append("")
        out.append("$$$$")
    return "\n".join(out) + "\n"


def _read_bytes(path: str, row: int, complex_id: str, column: str) -> bytes:
    try:
        with open(path, "rb") as fp:
            return fp.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest row {row} ({complex_id}): {column} file not found: {path}") from None


def _optional_float(value: str, row: int, complex_id: str, column: str) -> Optional[float]:
    if value is None or value.strip() == "":
        return None
    try:
        return float(value)
    except ValueError:
        raise ValidationError(f"manifest row {row} ({complex_id}): {column} is not a number: {value!r}") from None


def _optional_bool(value: str, row: int, complex_id: str) -> Optional[bool]:
    if value is None or value.strip() == "":
        return None
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "active"):
        return True
    if lowered in ("0", "false", "no", "inactive", "decoy"):
        return False
    raise ValidationError(f"manifest row {row} ({complex_id}): is_active not boolean: {value!r}")


MANIFEST_REQUIRED = ("complex_id", "ligand_sdf", "protein_pdb")


def load_manifest(path: os.PathLike) -> List[ComplexRecord]:
    """マニフェスト CSV を読み込み、参照ファイルを解析して ComplexRecord のリストを返す

    ファイルパスはマニフェストのあるディレクトリからの相対パスとして解決する。

    Raises:
        FileNotFoundError: 参照ファイルが無い（行番号と complex_id を含む）
        ValidationError: ec50_nm が正でない等
    """
    base = os.path.dirname(os.path.abspath(path))
    table = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in MANIFEST_REQUIRED if c not in table.columns]
    if missing:
        raise ValidationError(f"{path}: manifest is missing column(s) {missing}")

    proteins: Dict[str, ProteinStructure] = {}
    records: List[ComplexRecord] = []
    for row, entry in enumerate(table.to_dict(orient="records"), start=1):
        complex_id = entry["complex_id"].strip()
        ec50 = _optional_float(entry.get("ec50_nm"), row, complex_id, "ec50_nm")
        if ec50 is not None and not (ec50 > 0 and math.isfinite(ec50)):
            raise ValidationError(f"manifest row {row} ({complex_id}): ec50_nm must be positive, got {ec50}")
        confidence = _optional_float(entry.get("confidence"), row, complex_id, "confidence")
        if confidence is not None and not (0.0 <= confidence <= 1.0):
            raise ValidationError(f"manifest row {row} ({complex_id}): confidence must be within [0, 1]")
        is_active = _optional_bool(entry.get("is_active"), row, complex_id)

        ligand_path = os.path.join(base, entry["ligand_sdf"])
        protein_path = os.path.join(base, entry["protein_pdb"])
        poses = parse_sdf(_read_bytes(ligand_path, row, complex_id, "ligand_sdf"))
        if len(poses) == 0:
            raise ValidationError(f"manifest row {row} ({complex_id}): ligand SDF holds no records")
        if protein_path not in proteins:
            name = os.path.splitext(os.path.basename(protein_path))[0]
            proteins[protein_path] = parse_pdb(_read_bytes(protein_path, row, complex_id, "protein_pdb"), name)
        records.append(
            ComplexRecord(
                complex_id=complex_id,
                ligand=poses[0],
                protein=proteins[protein_path],
                label_ec50_nm=ec50,
                upstream_confidence=confidence,
                is_active=is_active,
                poses=tuple(poses),
            )
        )
    logger.info(f"Loaded {len(records)} record(s) from {path}")
    return records
