import numpy as np
import pytest

from chunksim import streamer
from chunksim.chunking import ContextMode
from chunksim.model import Model, ModelConfig
from chunksim.streamer import SessionError, StreamConfig


@pytest.fixture(scope="module")
def model():
    return Model.init(ModelConfig.small(d_mel=6, vocab=4, n_future=4, d_model=8, heads=2, d_ff=8,
                                        conv_kernel=3), seed=3)


@pytest.mark.parametrize("mode", list(ContextMode))
@pytest.mark.parametrize("T", [1, 5, 12, 23])
def test_streaming_equals_batch_path(model, rng, mode, T):
    cfg = StreamConfig(chunk=5, left=3, right=4, mode=mode)
    x = rng.normal(size=(T, 6))
    session = streamer.stream_utterance(model, x, cfg)
    assert np.allclose(session.posteriors(), streamer.offline_equivalence(x, model, cfg), atol=1e-9)


def test_feeding_granularity_is_irrelevant(model, rng):
    cfg = StreamConfig(chunk=5, left=3, right=4, mode=ContextMode.REAL)
    x = rng.normal(size=(19, 6))
    a = streamer.stream_utterance(model, x, cfg, step=1).posteriors()
    b = streamer.stream_utterance(model, x, cfg, step=7).posteriors()
    assert np.array_equal(a, b)


def test_emission_schedule(model, rng):
    cfg = StreamConfig(chunk=5, left=3, right=4, mode=ContextMode.REAL)
    s = streamer.StreamingSession(model, cfg)
    emitted_at = []
    for t in range(17):
        if s.feed_frames(rng.normal(size=(1, 6))):
            emitted_at.append(t + 1)
    assert emitted_at == [9, 14]
    blocks, log = s.finalize()
    assert len(blocks) == 2 and len(log.chunks) == 4
    assert s.posteriors().shape[0] == 17


@pytest.mark.parametrize("mode,wait", [("real", 80), ("none", 40), ("sim", 40)])
def test_wait_latency(model, mode, wait):
    cfg = StreamConfig.from_ms(400, 400, 400, mode)
    assert cfg.wait_frames == wait
    assert cfg.describe()["wait_ms"] == wait * 10


def test_ms_validation():
    with pytest.raises(ValueError):
        StreamConfig.from_ms(405, 400, 400)
    with pytest.raises(ValueError):
        streamer.ms_to_frames(-10)


def test_session_misuse(model, rng):
    with pytest.raises(ValueError):
        streamer.StreamingSession(model, StreamConfig(chunk=5, left=3, right=5, mode=ContextMode.SIMULATED))
    with pytest.raises(ValueError):
        streamer.StreamingSession(model, StreamConfig(chunk=0, left=3, right=4))
    s = streamer.session_new(model, StreamConfig(chunk=5, left=3, right=4))
    s.feed_frames(rng.normal(size=(3, 6)))
    s.finalize()
    with pytest.raises(SessionError):
        s.feed_frames(rng.normal(size=(1, 6)))
    with pytest.raises(SessionError):
        s.finalize()


def test_incremental_greedy_matches_decoder(model, rng):
    from chunksim import ctc

    s = streamer.stream_utterance(model, rng.normal(size=(30, 6)), StreamConfig(chunk=5, left=3, right=4))
    assert s.hypothesis() == ctc.greedy_decode(s.posteriors())
    assert s.hypothesis(beam=4) == ctc.prefix_beam_decode(s.posteriors(), 4)


def test_latency_summary(model, rng):
    s = streamer.stream_utterance(model, rng.normal(size=(12, 6)), StreamConfig(chunk=5, left=3, right=4))
    summary = s.latency.summary()
    assert summary["chunks"] == 3 and summary["wait_ms"] == [50]
    assert summary["max_compute_ms"] >= summary["mean_compute_ms"] > 0
