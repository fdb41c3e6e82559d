import logging

import numpy as np
import pytest

from kegraph.errors import DanglingReferenceError, ParseError, SchemaError
from kegraph.graph_store import (
    EntityKind, load_fkg_dir, parse_key, read_triples, validate_schema, write_fkg_dir,
    year_gap_summary,
)

from conftest import TOY_ATTRIBUTES, TOY_LABELS, TOY_TRIPLES, write_toy_files


def test_companies_come_first(toy_fkg):
    assert toy_fkg.n_companies == 4
    for i in range(4):
        assert toy_fkg.kind_of(i) is EntityKind.COMPANY_YEAR
    assert toy_fkg.entity_keys[:4] == ("CompanyYear:A@2010", "CompanyYear:A@2011",
                                       "CompanyYear:B@2010", "CompanyYear:C@2011")
    assert toy_fkg.company_records()[3] == ("C", 2011)


def test_attributes_and_mask(toy_fkg):
    assert toy_fkg.attribute_names == ("f_0", "f_1")
    assert toy_fkg.attributes[0].tolist() == [1.0, 0.0]
    assert toy_fkg.attribute_mask[0].tolist() == [True, False]
    assert toy_fkg.attribute_mask[3].tolist() == [False, True]


def test_labels(toy_fkg):
    labels = toy_fkg.labels
    assert labels.noisy.tolist() == [1, 0, 0, 1]
    assert labels.violation_year[0] == 2010
    assert labels.declared_year[0] == 2012
    assert np.isnan(labels.violation_year[1])
    assert labels.record_year.tolist() == [2010, 2011, 2010, 2011]


def test_graph_is_read_only(toy_fkg):
    with pytest.raises(ValueError):
        toy_fkg.triples[0, 0] = 5


def test_comments_and_duplicates_are_skipped(tmp_path, caplog):
    caplog.set_level(logging.INFO)
    triples = TOY_TRIPLES + "CompanyYear:A@2010\trelated_party\tRPT:r1\n\n"
    fkg = load_fkg_dir(write_toy_files(tmp_path / "dup", triples=triples))
    assert fkg.n_triples == 13
    assert "duplicate" in caplog.text


def test_read_triples_reports_line_number(tmp_path):
    path = tmp_path / "triples.tsv"
    path.write_text("RPT:a\trelated_party\tRPT:b\nRPT:a\trelated_party\n", encoding="utf-8")
    with pytest.raises(ParseError) as excinfo:
        list(read_triples(path))
    assert excinfo.value.line_number == 2
    assert ":2:" in str(excinfo.value)


def test_company_without_attribute_row(tmp_path):
    triples = TOY_TRIPLES + "CompanyYear:D@2012\tsame_company_as\tCompanyMeta:D\n"
    with pytest.raises(DanglingReferenceError):
        load_fkg_dir(write_toy_files(tmp_path / "bad", triples=triples))


def test_label_for_unknown_company(tmp_path):
    labels = TOY_LABELS + "Z,2010,0,,\n"
    with pytest.raises(DanglingReferenceError):
        load_fkg_dir(write_toy_files(tmp_path / "bad", labels=labels))


def test_duplicate_label_row(tmp_path):
    labels = TOY_LABELS + "B,2010,0,,\n"
    with pytest.raises(SchemaError):
        load_fkg_dir(write_toy_files(tmp_path / "bad", labels=labels))


def test_duplicate_attribute_row(tmp_path):
    attributes = TOY_ATTRIBUTES + "B,2010,1.0,1.0\n"
    with pytest.raises(SchemaError):
        load_fkg_dir(write_toy_files(tmp_path / "bad", attributes=attributes))


@pytest.mark.parametrize("labels", [
    TOY_LABELS.replace("B,2010,0,,", "B,2010,2,,"),
    TOY_LABELS.replace("label,", "is_fraud,"),
    TOY_LABELS.replace("C,2011,1,2011,2011", "C,2011,1,soon,2011"),
])
def test_malformed_labels(tmp_path, labels):
    with pytest.raises(ParseError):
        load_fkg_dir(write_toy_files(tmp_path / "bad", labels=labels))


def test_malformed_attribute_value(tmp_path):
    attributes = TOY_ATTRIBUTES.replace("3.0,1.5", "3.0,high")
    with pytest.raises(ParseError):
        load_fkg_dir(write_toy_files(tmp_path / "bad", attributes=attributes))


@pytest.mark.parametrize("name", ["triples.tsv", "attributes.csv", "labels.csv"])
def test_missing_file_is_a_parse_error(tmp_path, name):
    directory = write_toy_files(tmp_path / "toy")
    (directory / name).unlink()
    with pytest.raises(ParseError) as excinfo:
        load_fkg_dir(directory)
    assert excinfo.value.path.endswith(name)
    assert excinfo.value.line_number == 0


def test_row_with_extra_fields_reports_its_line(tmp_path):
    attributes = TOY_ATTRIBUTES.replace("B,2010,3.0,1.5", "B,2010,3.0,1.5,9.0")
    with pytest.raises(ParseError) as excinfo:
        load_fkg_dir(write_toy_files(tmp_path / "bad", attributes=attributes))
    assert excinfo.value.line_number == 4


def test_short_rows_are_read_as_empty_cells(tmp_path):
    attributes = TOY_ATTRIBUTES.replace("C,2011,,2.5", "C,2011")
    labels = TOY_LABELS.replace("A,2011,0,,", "A,2011,0")
    fkg = load_fkg_dir(write_toy_files(tmp_path / "short", attributes=attributes, labels=labels))
    assert not fkg.attribute_mask[3].any()
    assert fkg.labels.noisy[1] == 0
    assert np.isnan(fkg.labels.declared_year[1])


@pytest.mark.parametrize("key", ["nokind", "Planet:x", "RPT:"])
def test_parse_key_rejects(key):
    with pytest.raises(SchemaError):
        parse_key(key)


def test_toy_graph_is_valid(toy_fkg):
    report = validate_schema(toy_fkg)
    assert report.is_empty
    assert report.to_lines() == []


def test_company_linked_to_two_metas(tmp_path):
    triples = TOY_TRIPLES + "CompanyYear:A@2011\tsame_company_as\tCompanyMeta:B\n"
    fkg = load_fkg_dir(write_toy_files(tmp_path / "bad", triples=triples))
    report = validate_schema(fkg)
    assert "company_meta_link" in report
    assert "CompanyYear:A@2011" in report["company_meta_link"].examples


def test_person_split_across_metas(tmp_path):
    triples = TOY_TRIPLES.replace("DSE:p1@2011\tsame_person_as\tDSEMeta:p1",
                                  "DSE:p1@2011\tsame_person_as\tDSEMeta:p2")
    report = validate_schema(load_fkg_dir(write_toy_files(tmp_path / "bad", triples=triples)))
    assert "dse_meta_link" in report
    assert report["dse_meta_link"].count == 2


def test_missing_label_and_bad_order(tmp_path):
    labels = TOY_LABELS.replace("A,2011,0,,\n", "").replace("2010,2012", "2012,2010")
    fkg = load_fkg_dir(write_toy_files(tmp_path / "bad", labels=labels))
    report = validate_schema(fkg)
    assert set(report.violations) == {"company_row_count", "label_order"}
    assert report["label_order"].examples == ["CompanyYear:A@2010"]


def test_strict_loading_raises(tmp_path):
    labels = TOY_LABELS.replace("2010,2012", "2012,2010")
    directory = write_toy_files(tmp_path / "bad", labels=labels)
    load_fkg_dir(directory)
    with pytest.raises(SchemaError):
        load_fkg_dir(directory, strict=True)


def test_write_then_load_keeps_graph(toy_fkg, tmp_path):
    write_fkg_dir(toy_fkg, tmp_path / "copy")
    again = load_fkg_dir(tmp_path / "copy")
    assert again.entity_keys[:4] == toy_fkg.entity_keys[:4]
    original = {(toy_fkg.entity_keys[h], toy_fkg.relations[r], toy_fkg.entity_keys[t])
                for h, r, t in toy_fkg.triples.tolist()}
    reloaded = {(again.entity_keys[h], again.relations[r], again.entity_keys[t])
                for h, r, t in again.triples.tolist()}
    assert original == reloaded
    np.testing.assert_array_equal(again.attribute_mask, toy_fkg.attribute_mask)
    np.testing.assert_array_equal(again.attributes, toy_fkg.attributes)
    np.testing.assert_array_equal(again.labels.noisy, toy_fkg.labels.noisy)


def test_year_gap_summary(toy_fkg):
    summary = year_gap_summary(toy_fkg)
    assert summary["n_frauds"] == 2
    assert summary["gap_counts"] == {0: 1, 2: 1}
    assert summary["gap0_share"] == 0.5
    assert summary["mean_gap"] == 1.0
