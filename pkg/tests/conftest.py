import pytest
import numpy as np

from pyequicpi import *

from structures import amide_ligand, chain_ligand, protein_pdb_text, write_manifest


@pytest.fixture
def pocket_pdb() -> str:
    return protein_pdb_text()


@pytest.fixture
def pocket(pocket_pdb) -> ProteinStructure:
    return parse_pdb(pocket_pdb, "pocket")


@pytest.fixture
def complex_record(pocket) -> ComplexRecord:
    return ComplexRecord(complex_id="cpx1", ligand=amide_ligand(), protein=pocket, label_ec50_nm=250.0)


@pytest.fixture
def small_model_config() -> ModelConfig:
    return ModelConfig(
        layers=2,
        multiplicities=(4, 2, 1),
        edge_mlp_hidden=8,
        readout_hidden=8,
        fingerprint_width=64,
        fingerprint_embed=8,
    )


@pytest.fixture
def small_cutoff() -> CutoffConfig:
    return CutoffConfig(rbf_k=8)


@pytest.fixture
def small_fingerprint() -> FingerprintConfig:
    return FingerprintConfig(radius=2, nbits=64)


@pytest.fixture
def small_config_data() -> dict:
    """CLI 用の小さなモデル設定（JSON に書き出して ``--config`` へ渡す）"""
    return {
        "cutoff": {"rbf_k": 8},
        "fingerprint": {"nbits": 64},
        "model": {
            "layers": 1,
            "multiplicities": [4, 2, 1],
            "edge_mlp_hidden": 8,
            "readout_hidden": 8,
            "fingerprint_width": 64,
            "fingerprint_embed": 8,
        },
        "train": {"steps": 3, "batch_size": 2, "log_every": 1},
    }


@pytest.fixture
def dataset_dir(tmp_path, pocket_pdb):
    """タンパク質1つとリガンド4種の小さなデータセット。マニフェストのパスを返す"""
    (tmp_path / "pocket.pdb").write_text(pocket_pdb, encoding="utf-8")
    ligands = {
        "amide": amide_ligand(),
        "propane": chain_ligand(["C", "C", "C"], name="propane"),
        "ethanol": chain_ligand(["C", "C", "O"], name="ethanol"),
        "butylamine": chain_ligand(["C", "C", "C", "C", "N"], name="butylamine", z=4.5),
    }
    rows = []
    for k, (name, mol) in enumerate(ligands.items()):
        (tmp_path / f"{name}.sdf").write_text(write_sdf([mol]), encoding="utf-8")
        rows.append(
            {
                "complex_id": f"cpx{k}",
                "ligand_sdf": f"{name}.sdf",
                "protein_pdb": "pocket.pdb",
                "ec50_nm": [12.0, 340.0, 5600.0, 78.0][k],
                "confidence": "",
                "is_active": ["1", "0", "0", "1"][k],
            }
        )
    return write_manifest(tmp_path, rows)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240607)
