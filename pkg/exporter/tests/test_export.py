"""Exporter: CoNLL-U token reading, the hash embedder, EMB1 output."""

import json
import struct

import numpy as np
import pytest

from embexport.cli import run
from embexport.core import (
    ExportError,
    ExportSpec,
    HashEmbedder,
    export,
    file_checksum,
    make_embedder,
    read_tokens,
)

CONLLU = """\
# text = a toy
1\ta\t_\tDET\t_\t_\t2\tdet\t_\t_
2\ttoy\t_\tNOUN\t_\t_\t0\troot\t_\t_

1-2\tdon't\t_\t_\t_\t_\t_\t_\t_\t_
1\tdo\t_\tAUX\t_\t_\t0\troot\t_\t_
2\tnot\t_\tPART\t_\t_\t1\tadvmod\t_\t_
2.1\telided\t_\t_\t_\t_\t_\t_\t_\t_
"""


@pytest.fixture
def conllu(tmp_path):
    p = tmp_path / "s.conllu"
    p.write_text(CONLLU, encoding="utf-8")
    return str(p)


class TestReadTokens:
    def test_skips_ranges_and_empty_nodes(self, conllu):
        sents = read_tokens(conllu)
        assert sents == [["a", "toy"], ["do", "not"]]

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "bad.conllu"
        p.write_text("justoneword\n", encoding="utf-8")
        with pytest.raises(ExportError):
            read_tokens(str(p))


class TestSpec:
    def test_layer_zero_required(self):
        with pytest.raises(ExportError, match="layer 0"):
            ExportSpec(conllu="x", layers=(1, 2))

    def test_layers_sorted(self):
        with pytest.raises(ExportError, match="sorted"):
            ExportSpec(conllu="x", layers=(1, 0))

    def test_no_layers(self):
        with pytest.raises(ExportError):
            ExportSpec(conllu="x", layers=())


class TestHashEmbedder:
    def test_deterministic_per_token(self):
        e1 = HashEmbedder("hash-16")
        e2 = HashEmbedder("hash-16")
        a = e1.embed(["word", "word", "other"], (0,))
        b = e2.embed(["word", "word", "other"], (0,))
        assert np.array_equal(a, b)
        assert np.array_equal(a[0, 0], a[0, 1])  # same type, same vector
        assert not np.array_equal(a[0, 0], a[0, 2])

    def test_layer_zero_context_independent(self):
        e = HashEmbedder("hash-8")
        a = e.embed(["w", "x"], (0,))
        b = e.embed(["w", "y"], (0,))
        assert np.array_equal(a[0, 0], b[0, 0])

    def test_higher_layers_contextual(self):
        e = HashEmbedder("hash-8")
        a = e.embed(["w", "x"], (1,))
        b = e.embed(["w", "y"], (1,))
        assert not np.array_equal(a[0, 0], b[0, 0])

    def test_layer_out_of_range(self):
        with pytest.raises(ExportError, match="layer 3"):
            HashEmbedder("hash-8").embed(["w"], (3,))

    def test_bad_model_id(self):
        with pytest.raises(ExportError):
            HashEmbedder("hash-zero")
        with pytest.raises(ExportError):
            HashEmbedder("hash-0")

    def test_make_embedder_dispatch(self):
        assert isinstance(make_embedder("hash-32"), HashEmbedder)


class TestExport:
    def test_header_arithmetic(self, conllu, tmp_path):
        out = str(tmp_path / "x.emb")
        manifest = export(ExportSpec(conllu=conllu, model="hash-5",
                                     layers=(0, 1), out=out))
        assert manifest["n_sentences"] == 2
        assert manifest["n_tokens"] == 4
        assert manifest["dim"] == 5
        with open(out, "rb") as f:
            data = f.read()
        assert data[:4] == b"EMB1"
        version, dim, n_layers, n_sents = struct.unpack_from("<IIIQ", data, 4)
        assert (version, dim, n_layers, n_sents) == (1, 5, 2, 2)
        # 2 sentences x (12-byte record header + 2 layers * 2 tokens * 5 * 4)
        assert len(data) == 24 + 2 * (12 + 2 * 2 * 5 * 4)

    def test_manifest_written_with_checksum(self, conllu, tmp_path):
        out = str(tmp_path / "x.emb")
        manifest = export(ExportSpec(conllu=conllu, model="hash-4", out=out))
        on_disk = json.load(open(out + ".json"))
        assert on_disk == manifest
        assert on_disk["checksum_sha256"] == file_checksum(out)
        assert on_disk["pooling"] == "none"

    def test_re_export_checksum_stable(self, conllu, tmp_path):
        a = export(ExportSpec(conllu=conllu, model="hash-4",
                              out=str(tmp_path / "a.emb")))
        b = export(ExportSpec(conllu=conllu, model="hash-4",
                              out=str(tmp_path / "b.emb")))
        assert a["checksum_sha256"] == b["checksum_sha256"]


class TestCli:
    def test_export_command(self, conllu, tmp_path, capsys):
        out = str(tmp_path / "x.emb")
        code = run(["export", "--conllu", conllu, "--model", "hash-6",
                    "--layers", "0,1,2", "--out", out])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["layers"] == [0, 1, 2]

    def test_missing_layer_zero_fails(self, conllu, tmp_path, capsys):
        code = run(["export", "--conllu", conllu, "--layers", "1",
                    "--out", str(tmp_path / "x.emb")])
        assert code == 1
        assert "layer 0" in capsys.readouterr().err

    def test_missing_file_fails(self, tmp_path):
        code = run(["export", "--conllu", str(tmp_path / "nope.conllu"),
                    "--out", str(tmp_path / "x.emb")])
        assert code == 1
