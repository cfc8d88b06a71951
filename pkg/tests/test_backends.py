import json
import math
import os
import stat

import numpy as np
import pytest

from lambdatune.backends import (
    DEFAULT_CRF_LIST,
    DEMO_CLIP,
    FEATURE_CRF,
    ClipRef,
    EncoderFailure,
    ExternalEncoder,
    SyntheticClipParams,
    SyntheticEncoder,
    UnknownClip,
    read_manifest,
    resolve_clip,
    synthetic_corpus,
    write_manifest,
)
from lambdatune.features import serialize_stats


def test_encode_is_deterministic(backend, demo_clip):
    a = backend.encode(demo_clip, 32, 0.8)
    b = backend.encode(demo_clip, 32, 0.8)
    assert a.point == b.point
    assert serialize_stats(a.stats) == serialize_stats(b.stats)


def test_different_k_same_quality_different_rate(backend, demo_clip):
    base = backend.encode(demo_clip, 32, 1.0)
    tuned = backend.encode(demo_clip, 32, demo_clip.source.k_star)
    assert tuned.point.quality == base.point.quality
    assert tuned.point.rate < base.point.rate  # the dip at k_star


def test_rate_falls_with_crf(backend, demo_clip):
    rates = [backend.encode(demo_clip, crf, 1.0).point.rate for crf in DEFAULT_CRF_LIST]
    assert all(a > b for a, b in zip(rates, rates[1:]))


def test_encode_counter_tracks_every_call(backend, demo_clip):
    before = backend.encodes
    backend.rd_curve(demo_clip, DEFAULT_CRF_LIST, k=1.0)
    backend.encode(demo_clip, FEATURE_CRF, 1.0)
    assert backend.encodes - before == len(DEFAULT_CRF_LIST) + 1


def test_frame_type_pattern(backend, demo_clip):
    stats = backend.encode(demo_clip, 32, 1.0).stats
    types = [f.frame_type for f in stats.frame_stats]
    assert len(types) == 150
    assert types.count("I") == 5 and types.count("P") == 35 and types.count("B") == 110
    assert types[0] == "I" and types[30] == "I"
    assert types[4] == "P" and types[1] == "B"


def test_stats_bitrate_matches_rd_point(backend, demo_clip):
    res = backend.encode(demo_clip, 27, 1.0)
    assert res.stats.clip_stats.avg_bitrate_kbps == pytest.approx(
        res.point.rate, rel=1e-9
    )


def test_ip_cost_ratio_tracks_k_star(backend):
    for k_star in (0.4, 1.0, 2.2):
        clip = ClipRef(
            id=f"t{k_star}",
            source=SyntheticClipParams(
                r0=4000, gamma=6, p0=44, s=0.8, k_star=k_star, g=0.1, sigma=0.2, seed=5
            ),
        )
        stats = backend.encode(clip, FEATURE_CRF, 1.0).stats
        ratios = [f.ip_cost_ratio for f in stats.frame_stats]
        assert np.mean(ratios) == pytest.approx(0.8 + 0.6 * k_star, abs=0.03)


def test_synthetic_rejects_file_clips(backend):
    with pytest.raises(UnknownClip):
        backend.encode(ClipRef(id="x", source="/tmp/x.y4m"), 32, 1.0)


def test_bad_crf_and_k_rejected(backend, demo_clip):
    with pytest.raises(ValueError):
        backend.encode(demo_clip, 99, 1.0)
    with pytest.raises(ValueError):
        backend.encode(demo_clip, 32, 0.0)


# -- corpus generation -------------------------------------------------------

def test_corpus_is_seeded_and_stable():
    a = synthetic_corpus(5, seed=3)
    b = synthetic_corpus(5, seed=3)
    assert [c.to_json() for c in a] == [c.to_json() for c in b]
    c = synthetic_corpus(5, seed=4)
    assert [x.to_json() for x in a] != [x.to_json() for x in c]


def test_corpus_prefix_property():
    # clip i is independent of corpus size, so specs like synth:seed:index work
    long = synthetic_corpus(10, seed=3)
    short = synthetic_corpus(4, seed=3)
    assert [c.to_json() for c in long[:4]] == [c.to_json() for c in short]


def test_k_star_range_and_ids():
    clips = synthetic_corpus(64, seed=0)
    assert len({c.id for c in clips}) == 64
    for c in clips:
        assert 0.2 <= c.source.k_star <= 3.0


def test_manifest_round_trip(tmp_path, small_corpus):
    path = tmp_path / "manifest.jsonl"
    write_manifest(small_corpus, path)
    back = read_manifest(path)
    assert [c.to_json() for c in back] == [c.to_json() for c in small_corpus]
    # file is one JSON object per line
    lines = path.read_text().splitlines()
    assert len(lines) == len(small_corpus)
    assert all(json.loads(line)["id"] for line in lines)


def test_resolve_clip_forms():
    assert resolve_clip("synth:demo").id == "synth:demo"
    clip = resolve_clip("synth:3:0002")
    ref = synthetic_corpus(3, seed=3)[2]
    assert clip.source.to_json() == ref.source.to_json()
    path_clip = resolve_clip("/data/bus_cif.y4m")
    assert not path_clip.synthetic and path_clip.id == "bus_cif"
    with pytest.raises(UnknownClip):
        resolve_clip("synth:not-a-number:7")


def test_demo_clip_optimum():
    assert DEMO_CLIP.source.k_star == 0.7


def test_params_validate():
    with pytest.raises(ValueError):
        SyntheticClipParams(r0=4000, gamma=6, p0=44, s=0.8, k_star=5.0, g=0.1,
                            sigma=0.2, seed=1)
    with pytest.raises(ValueError):
        SyntheticClipParams(r0=4000, gamma=6, p0=44, s=0.8, k_star=1.0, g=0.9,
                            sigma=0.2, seed=1)


def test_dip_is_minimal_at_k_star():
    p = SyntheticClipParams(r0=4000, gamma=6, p0=44, s=0.8, k_star=0.9, g=0.2,
                            sigma=0.15, seed=1)
    ks = np.linspace(0.2, 3.0, 200)
    dips = [p.dip(k) for k in ks]
    assert ks[int(np.argmin(dips))] == pytest.approx(0.9, abs=0.02)
    assert p.dip(p.k_star) == pytest.approx(1.0 - p.g)


# -- external driver ---------------------------------------------------------

FAKE_ENCODER = """#!/bin/sh
# {input} {crf} {k} {output} {log}: writes a tiny canonical stats log
cat > "$5" <<CSV
# avg_qp=$2
# elapsed_seconds=0.25
frame_type,bits,psnr_y,psnr_u,psnr_v,avg_chroma_dist,avg_res_energy,avg_luma,avg_cb,avg_cr,ip_cost_ratio
I,800000,41.0,44.0,44.4,30.0,200.0,120.0,128.0,127.0,1.1
P,300000,39.0,42.0,42.4,30.0,200.0,120.0,128.0,127.0,1.1
B,200000,38.5,41.5,41.9,30.0,200.0,120.0,128.0,127.0,1.1
B,210000,38.6,41.6,42.0,30.0,200.0,120.0,128.0,127.0,1.1
CSV
touch "$4"
"""


@pytest.fixture
def fake_encoder(tmp_path):
    script = tmp_path / "fake_encoder.sh"
    script.write_text(FAKE_ENCODER)
    script.chmod(script.stat().st_mode | stat.S_IEXEC)
    return script


def test_external_encoder_runs_template(tmp_path, fake_encoder):
    backend = ExternalEncoder(
        str(fake_encoder) + " {input} {crf} {k} {output} {log}",
        workdir=tmp_path / "work",
    )
    clip = ClipRef(id="bus", source="/data/bus.y4m", frame_count=4)
    res = backend.encode(clip, 32, 1.1)
    # 1,510,000 bits over 4 frames at 30 fps
    assert res.point.rate == pytest.approx(1510000 / 1000 / (4 / 30))
    assert res.stats.clip_stats.avg_qp == 32.0
    assert backend.encodes == 1


def test_external_encoder_surfaces_failures(tmp_path):
    script = tmp_path / "bad.sh"
    script.write_text("#!/bin/sh\necho boom >&2\nexit 3\n")
    script.chmod(script.stat().st_mode | stat.S_IEXEC)
    backend = ExternalEncoder(
        str(script) + " {input} {crf} {k} {output} {log}", workdir=tmp_path / "w"
    )
    clip = ClipRef(id="bus", source="/data/bus.y4m")
    with pytest.raises(EncoderFailure, match="boom"):
        backend.encode(clip, 32, 1.0)


def test_external_template_placeholders_enforced():
    with pytest.raises(ValueError, match="placeholders"):
        ExternalEncoder("encoder {input} {crf}")
