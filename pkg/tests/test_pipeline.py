import itertools

import numpy as np
import pytest

from brainmarkers import radiomics, synthetic
from brainmarkers.errors import AssemblyError, DegenerateInputError, FormatError, ValidationError
from brainmarkers.pipeline import (
    BLOCK_ORDER, PAPER_BLOCK_SIZES, FeatureBlock, FeatureMatrix, ManifestRow, SubjectRecord, append_manifest_row,
    assemble, check_paper_sizes, deep_column_names, extract_subject, import_deep_features, normalize_blocks,
    read_block_csv, read_manifest, read_matrix_csv, write_block_csv, write_matrix_csv, zscore_arrays,
    zscore_fit_apply,
)
from brainmarkers.texture import texture_column_names
from brainmarkers.volume_io import LabelMap, Region, write_labelmap, write_nifti, write_region_table

REGIONS = synthetic.region_table()


def _block(name, rng):
    if name == "radiomics":
        names = [f"{r.name}_{f}" for r in REGIONS for f in radiomics.FEATURE_NAMES]
    elif name == "texture":
        names = texture_column_names()
    elif name == "thickness":
        names = [f"{r.name}_{s}" for r in REGIONS if r.is_cortical for s in ("thk_mean", "thk_std")]
    else:
        names = deep_column_names()
    return FeatureBlock(rng.random(len(names)), names)


@pytest.fixture(scope="module")
def full_records():
    rng = np.random.default_rng(0)
    recs = []
    for i, dx in enumerate(["AD", "CN", "MCI", "CN", "AD"]):
        recs.append(SubjectRecord(f"s{i}", dx, 70.0 + i, {b: _block(b, rng) for b in BLOCK_ORDER}))
    return recs


def test_region_table_sizes():
    assert len(REGIONS) == 132
    assert sum(r.is_cortical for r in REGIONS) == 102


def test_full_assembly_29169(full_records):
    for r in full_records:
        check_paper_sizes(r)
    m = assemble(full_records, "AD-vs-CN", BLOCK_ORDER, include_age=True)
    assert m.shape == (4, 29169)
    assert m.column_names[0] == f"{REGIONS[0].name}_vol" and m.column_names[-1] == "age"
    assert m.column_names[1452] == "original_q0"


@pytest.mark.parametrize("n", range(1, 5))
def test_all_subset_combinations(full_records, n):
    for combo in itertools.combinations(BLOCK_ORDER, n):
        for age in (False, True):
            m = assemble(full_records, "MCI-vs-CN", combo, include_age=age)
            assert m.shape[1] == sum(PAPER_BLOCK_SIZES[b] for b in combo) + age
            # fixed order regardless of the requested order
            m2 = assemble(full_records, "MCI-vs-CN", combo[::-1], include_age=age)
            assert m.column_names == m2.column_names


def test_task_filter_and_labels(full_records):
    small = [SubjectRecord(r.subject_id, r.diagnosis, r.age, {"deep": r.blocks["deep"]})
             for r in full_records[:3]]
    m = assemble(small, "AD-vs-CN", {"deep"})
    assert m.subject_ids == ("s0", "s1") and m.labels.tolist() == [1, 0]
    m = assemble(full_records, "mci-vs-cn", {"deep"})
    assert m.task == "MCI-vs-CN" and m.labels.tolist() == [0, 1, 0]


def test_order_stability(full_records):
    a = assemble(full_records, "AD-vs-CN", {"thickness", "deep"}, include_age=True)
    b = assemble(full_records[::-1], "AD-vs-CN", {"thickness", "deep"}, include_age=True)
    assert a.subject_ids == b.subject_ids and np.array_equal(a.values, b.values)


def test_assembly_errors(full_records):
    rec = SubjectRecord("x", "AD", None, {"deep": full_records[0].blocks["deep"]})
    with pytest.raises(AssemblyError, match="x.*radiomics"):
        assemble([rec], "AD-vs-CN", {"radiomics"})
    with pytest.raises(AssemblyError, match="age"):
        assemble([rec], "AD-vs-CN", {"deep"}, include_age=True)
    with pytest.raises(AssemblyError):
        assemble([rec], "AD-vs-CN", {"bogus"})
    with pytest.raises(AssemblyError):
        assemble([rec, rec], "AD-vs-CN", {"deep"})


def test_record_validation():
    with pytest.raises(ValidationError):
        SubjectRecord("a", "XX")
    with pytest.raises(ValidationError):
        SubjectRecord("a", "AD", blocks={"deep": FeatureBlock(np.zeros(3), ["a", "b", "c"])})
    with pytest.raises(ValidationError):
        FeatureBlock(np.zeros(2), ["a"])
    with pytest.raises(ValidationError):
        check_paper_sizes(SubjectRecord("a", "AD", blocks={"thickness": FeatureBlock(np.zeros(4), list("abcd"))}))


# ---------------------------------------------------------- normalisation


def _rad_record(vol):
    names = [f"Left-Hippocampus_{f}" for f in radiomics.FEATURE_NAMES]
    v = np.arange(1.0, 12.0)
    v[0] = vol
    return SubjectRecord("s", "CN", 70.0, {"radiomics": FeatureBlock(v, names)})


def test_normalize_division():
    r = _rad_record(4000.0)
    n = normalize_blocks(r, 1.6e6)
    assert n.blocks["radiomics"].values[0] == pytest.approx(0.0025)
    assert np.array_equal(n.blocks["radiomics"].values[1:], r.blocks["radiomics"].values[1:])
    assert r.blocks["radiomics"].values[0] == 4000.0  # input unchanged


def test_normalize_identity():
    r = _rad_record(4000.0)
    n = normalize_blocks(normalize_blocks(r, 1.0), 1.0)
    assert np.array_equal(n.blocks["radiomics"].values, r.blocks["radiomics"].values)


@pytest.mark.parametrize("icv", [0.0, -1.0, float("nan")])
def test_normalize_bad_icv(icv):
    with pytest.raises(DegenerateInputError):
        normalize_blocks(_rad_record(1.0), icv)


def test_normalize_scaled_phantom():
    a = np.zeros((12, 12, 12), np.int32)
    a[1:5, 2:7, 3:6] = 1
    a[6:11, 6:10, 2:9] = 2
    regions = (Region(1, "a"), Region(2, "b"))
    out = []
    for sp in ((1.0, 1.0, 1.0), (2.0, 2.0, 2.0)):
        lm = LabelMap(a, regions, sp)
        values, names, _ = radiomics.radiomics_block(lm)
        rec = SubjectRecord("s", "CN", None, {"radiomics": FeatureBlock(values, names)})
        out.append(normalize_blocks(rec, radiomics.intracranial_volume(lm)).blocks["radiomics"])
    vol = [i for i, n in enumerate(out[0].names) if n.endswith("_vol")]
    assert np.array_equal(out[0].values[vol], out[1].values[vol])


# ------------------------------------------------------------------ zscore


def test_zscore_hand_values():
    (z, t), stats = zscore_arrays(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]), np.array([[2.0, 9.0]]))
    assert np.allclose(z[:, 0], [-1.2247, 0, 1.2247], atol=1e-4)
    assert np.all(z[:, 1] == 0) and t[0, 1] == 0
    assert t[0, 0] == 0.0
    assert stats.constant.tolist() == [False, True]


def test_zscore_matrices(full_records):
    m = assemble(full_records, "AD-vs-CN", {"deep"})
    (tr, te), stats = zscore_fit_apply(m.rows([0, 1, 2]), m.rows([3]))
    assert np.allclose(tr.values.mean(0), 0, atol=1e-12)
    assert np.allclose((m.values[3] - stats.mean) / stats.std, te.values[0])


# -------------------------------------------------------------------- I/O


def test_matrix_csv_round_trip(tmp_path, full_records):
    m = assemble(full_records, "AD-vs-CN", {"thickness"}, include_age=True)
    vals = m.values.copy()
    vals[0, 0] = 1 / 3
    vals[1, 1] = 1e-300
    m = FeatureMatrix(m.column_names, m.subject_ids, m.labels, vals, m.task)
    write_matrix_csv(tmp_path / "m.csv", m)
    r = read_matrix_csv(tmp_path / "m.csv")
    assert r.column_names == m.column_names and r.subject_ids == m.subject_ids
    assert np.array_equal(r.values, m.values) and np.array_equal(r.labels, m.labels)
    assert r.task == m.task


def test_matrix_rejects_bad_values():
    with pytest.raises(ValidationError):
        FeatureMatrix(("a",), ("s",), [1], [[np.nan]], "AD-vs-CN")
    with pytest.raises(ValidationError):
        FeatureMatrix(("a", "a"), ("s",), [1], [[1.0, 2.0]], "AD-vs-CN")


def test_block_csv_round_trip(tmp_path):
    write_block_csv(tmp_path / "b.csv", ["s1", "s2"], ["x", "y"], [[0.1, 2.0], [3.0, 1e-20]])
    names, rows = read_block_csv(tmp_path / "b.csv")
    assert names == ["x", "y"] and rows["s2"][1] == 1e-20


def _deep_csv(path, rows):
    header = "subject_id," + ",".join(f"f{i}" for i in range(512))
    path.write_text(header + "\n" + "\n".join(rows) + "\n")


def test_deep_import(tmp_path):
    _deep_csv(tmp_path / "d.csv", ["a," + ",".join(["0.5"] * 512), "b," + ",".join(["1"] * 512)])
    d = import_deep_features(tmp_path / "d.csv")
    assert sorted(d) == ["a", "b"] and d["a"].shape == (512,)


def test_deep_import_short_row(tmp_path):
    _deep_csv(tmp_path / "d.csv", ["a," + ",".join(["0.5"] * 512), "b," + ",".join(["1"] * 511)])
    with pytest.raises(FormatError, match="row 3"):
        import_deep_features(tmp_path / "d.csv")


def test_deep_import_duplicate(tmp_path):
    _deep_csv(tmp_path / "d.csv", ["a," + ",".join(["0"] * 512)] * 2)
    with pytest.raises(FormatError, match="duplicate"):
        import_deep_features(tmp_path / "d.csv")


def test_deep_import_bad_header(tmp_path):
    (tmp_path / "d.csv").write_text("id,f0\n")
    with pytest.raises(FormatError):
        import_deep_features(tmp_path / "d.csv")


def test_manifest_upsert(tmp_path):
    p = tmp_path / "manifest.csv"
    append_manifest_row(p, ManifestRow("s1", "CN", 72.3, tmp_path / "a.nii", tmp_path / "b.nii"))
    append_manifest_row(p, ManifestRow("s2", "AD", None, tmp_path / "c.nii", tmp_path / "d.nii"))
    first = p.read_bytes()
    append_manifest_row(p, ManifestRow("s1", "CN", 72.3, tmp_path / "a.nii", tmp_path / "b.nii"))
    assert p.read_bytes() == first
    rows = read_manifest(p)
    assert [r.subject_id for r in rows] == ["s1", "s2"]
    assert rows[0].age == 72.3 and rows[1].age is None
    assert rows[0].volume_path == tmp_path / "a.nii"


def test_manifest_bad_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("id,dx\n")
    with pytest.raises(FormatError):
        read_manifest(p)


# ------------------------------------------------------------- extraction


def test_extract_synthetic_subject(tmp_path):
    subj = synthetic.cohort_subjects(synthetic.CohortSpec(n_per_class={"CN": 1}), seed=3)[0]
    from brainmarkers.volume_io import generate_phantom
    vol, lm = generate_phantom(subj.spec, subj.seed)
    write_nifti(tmp_path / "t1.nii", vol)
    write_labelmap(tmp_path / "lab.nii", lm)
    write_region_table(tmp_path / "regions.csv", lm.regions)
    blocks, icv = extract_subject(tmp_path / "t1.nii", tmp_path / "lab.nii", tmp_path / "regions.csv",
                                  ["radiomics", "texture", "thickness"])
    assert {b: len(v.values) for b, v in blocks.items()} == {"radiomics": 1452, "texture": 27000, "thickness": 204}
    assert icv > 0
    assert not blocks["radiomics"].missing.any()
    assert not blocks["thickness"].missing.any()
    i = blocks["thickness"].names.index("ctx-lh-region00_thk_mean")
    assert 1.5 <= blocks["thickness"].values[i] <= 3.5
