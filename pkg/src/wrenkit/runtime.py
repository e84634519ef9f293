"""Fixed-memory chunked inference.

Audio is fed in arbitrary pieces.  Every complete ``n_fft`` window
(hop-spaced, no centre padding) is turned into one frame as soon as its
last sample arrives, so a chunk never waits on samples from the next one.
All carried state has a size fixed by the model configuration:

    audio carry        (n_fft - 1) samples, plus its fill count
    encoder blocks     (k - 1) * d * C_in left context + C_out SE sums each
    GRU                H hidden values
    attention          running max, denominator, H-vector numerator

``StreamState.to_bytes`` writes these fields little-endian in that order
behind a versioned header; see ``state_layout`` for the byte formula.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import head
from .frontend import build_filterbank, frame_count, frame_signal, frontend_frames, hann_window
from .head import AttnAccumulator
from .params import ModelParams

STATE_MAGIC = b"WRKS"
STATE_VERSION = 1


class StreamError(RuntimeError):
    pass


class Engine:
    """Model weights prepared for inference (folded norms, contiguous arrays).

    Immutable after construction and safe to share between streams.
    """

    def __init__(self, params: ModelParams, dtype=np.float32, backend: str | None = None,
                 fb_weights: np.ndarray | None = None):
        self.params = params
        self.cfg = params.cfg
        self.dtype = np.dtype(dtype)
        self.backend = backend
        fbp = self.cfg.frontend
        if fb_weights is None:
            if self.cfg.frontend_mode == "full":
                fb_weights = params["frontend.weights"]
            else:
                fb_weights = build_filterbank(fbp, self.cfg.frontend_mode).weights
        self.fb = np.ascontiguousarray(fb_weights, dtype=self.dtype)
        self.window = hann_window(fbp.n_fft, self.dtype)
        self.stem, self.blocks = enc.prepare_encoder(params, self.dtype)
        self.gru, self.att = head.prepare_head(params, self.dtype)
        self.n_fft = fbp.n_fft
        self.hop = fbp.hop
        self.sr = fbp.sr

    def features(self, frames: np.ndarray) -> np.ndarray:
        return frontend_frames(frames.astype(self.dtype, copy=False), self.fb, self.window)


@dataclass
class StreamState:
    buf: np.ndarray  # (n_fft - 1,) pending samples
    buf_len: int
    frames: int
    samples: int
    encoder: enc.EncoderState
    h: np.ndarray
    acc: AttnAccumulator

    def copy(self) -> "StreamState":
        return StreamState(
            self.buf.copy(), self.buf_len, self.frames, self.samples,
            enc.EncoderState([
                enc.BlockState(b.left_ctx.copy(), enc.PoolState(b.pool.count, b.pool.sums.copy()))
                for b in self.encoder.blocks
            ]),
            self.h.copy(), self.acc.copy(),
        )

    def to_bytes(self, engine: Engine) -> bytes:
        out = io.BytesIO()
        out.write(STATE_MAGIC)
        out.write(struct.pack("<H16s2s", STATE_VERSION, engine.cfg.topology_hash().encode(),
                              engine.dtype.str[1:].encode()))
        out.write(struct.pack("<IQQ", self.buf_len, self.frames, self.samples))
        dt = engine.dtype.newbyteorder("<")
        out.write(self.buf.astype(dt).tobytes())
        for b in self.encoder.blocks:
            out.write(b.left_ctx.astype(dt).tobytes())
            out.write(struct.pack("<Q", b.pool.count))
            out.write(b.pool.sums.astype("<f8").tobytes())
        out.write(self.h.astype(dt).tobytes())
        out.write(struct.pack("<dd", self.acc.max_score, self.acc.denominator))
        out.write(self.acc.numerator.astype("<f8").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, engine: Engine, blob: bytes) -> "StreamState":
        if len(blob) != state_nbytes(engine):
            raise StreamError(f"state blob has {len(blob)} bytes, expected {state_nbytes(engine)}")
        if blob[:4] != STATE_MAGIC:
            raise StreamError("not a stream state blob")
        version, topo, dcode = struct.unpack_from("<H16s2s", blob, 4)
        if version != STATE_VERSION:
            raise StreamError(f"unsupported state version {version}")
        if topo.decode() != engine.cfg.topology_hash():
            raise StreamError("state was saved for a different model topology")
        if dcode.decode() != engine.dtype.str[1:]:
            raise StreamError(f"state dtype {dcode.decode()} != engine dtype {engine.dtype.str[1:]}")
        off = 4 + struct.calcsize("<H16s2s")
        buf_len, frames, samples = struct.unpack_from("<IQQ", blob, off)
        off += struct.calcsize("<IQQ")
        dt = engine.dtype.newbyteorder("<")

        def take(n, dtype=dt):
            nonlocal off
            a = np.frombuffer(blob, dtype=dtype, count=n, offset=off)
            off += a.nbytes
            return a.astype(dtype.newbyteorder("=") if isinstance(dtype, np.dtype) else dtype)

        buf = take(engine.n_fft - 1)
        blocks = []
        for blk in engine.blocks:
            ctx = take(blk.context * blk.c_in).reshape(blk.context, blk.c_in)
            (count,) = struct.unpack_from("<Q", blob, off)
            off += 8
            sums = take(blk.c_out, np.dtype("<f8"))
            blocks.append(enc.BlockState(ctx, enc.PoolState(int(count), sums)))
        h = take(engine.gru.hidden)
        m, den = struct.unpack_from("<dd", blob, off)
        off += 16
        num = take(engine.gru.hidden, np.dtype("<f8"))
        return cls(buf, buf_len, frames, samples, enc.EncoderState(blocks), h,
                   AttnAccumulator(m, num, den))


def state_layout(engine: Engine) -> dict[str, int]:
    """Byte count of every serialized field group."""
    item = engine.dtype.itemsize
    H = engine.gru.hidden
    layout = {
        "header": 4 + struct.calcsize("<H16s2s") + struct.calcsize("<IQQ"),
        "audio_carry": (engine.n_fft - 1) * item,
    }
    for j, blk in enumerate(engine.blocks):
        layout[f"block{j}.left_ctx"] = blk.context * blk.c_in * item
        layout[f"block{j}.se_pool"] = 8 + 8 * blk.c_out
    layout["gru.h"] = H * item
    layout["attention"] = 16 + 8 * H
    return layout


def state_nbytes(engine: Engine) -> int:
    return sum(state_layout(engine).values())


def init_stream(engine: Engine) -> StreamState:
    return StreamState(
        buf=np.zeros(engine.n_fft - 1, dtype=engine.dtype),
        buf_len=0, frames=0, samples=0,
        encoder=enc.init_encoder_state(engine.blocks, engine.dtype),
        h=np.zeros(engine.gru.hidden, dtype=engine.dtype),
        acc=AttnAccumulator.empty(engine.gru.hidden),
    )


def start_segment(engine: Engine, state: StreamState, reset_hidden: bool = False) -> StreamState:
    """Begin a new prediction segment.

    The attention accumulator always restarts.  With ``reset_hidden`` the
    recurrent and convolutional carries are zeroed as well; by default they
    carry over so context persists between consecutive segments.
    """
    if reset_hidden:
        fresh = init_stream(engine)
        fresh.frames, fresh.samples = state.frames, state.samples
        return fresh
    state.acc = AttnAccumulator.empty(engine.gru.hidden)
    return state


def _run_frames(engine: Engine, state: StreamState, frames: np.ndarray) -> None:
    feats = engine.features(frames)
    x, _ = enc.encoder_forward(feats, engine.stem, engine.blocks, state.encoder, engine.backend)
    hs = head.gru_sequence(x, state.h, engine.gru, engine.backend)
    state.acc = head.attend_accumulate(hs, state.acc, engine.att, engine.backend)
    state.frames += frames.shape[0]


def process_chunk(engine: Engine, state: StreamState, samples: np.ndarray,
                  sr: int | None = None) -> tuple[StreamState, np.ndarray | None]:
    """Consume ``samples``; returns the state and a running class estimate.

    The estimate is ``None`` until the first frame is complete.
    """
    if sr is not None and sr != engine.sr:
        raise StreamError(f"stream opened at {sr} Hz but model expects {engine.sr} Hz")
    samples = np.asarray(samples, dtype=engine.dtype).reshape(-1)
    data = np.concatenate([state.buf[:state.buf_len], samples])
    nf = frame_count(len(data), engine.n_fft, engine.hop)
    if nf:
        _run_frames(engine, state, frame_signal(data, engine.n_fft, engine.hop))
    rest = data[nf * engine.hop:]
    state.buf[:len(rest)] = rest
    state.buf[len(rest):] = 0
    state.buf_len = len(rest)
    state.samples += len(samples)
    return state, snapshot(engine, state)


def snapshot(engine: Engine, state: StreamState) -> np.ndarray | None:
    if state.acc.is_empty:
        return None
    return head.classify(head.finalize_context(state.acc), engine.att)


def finalize(engine: Engine, state: StreamState, pad_tail: bool = False) -> tuple[np.ndarray, int]:
    """Final class probabilities and argmax.  Leaves ``state`` untouched.

    ``pad_tail`` zero-pads the trailing partial window into one extra frame
    when it holds at least one sample not covered by an emitted frame.
    """
    st = state
    covered = engine.n_fft - engine.hop if state.frames else 0
    if pad_tail and state.buf_len > covered:
        st = state.copy()
        frame = np.zeros((1, engine.n_fft), dtype=engine.dtype)
        frame[0, :st.buf_len] = st.buf[:st.buf_len]
        _run_frames(engine, st, frame)
    if st.frames == 0:
        raise StreamError("finalize on an empty stream: no complete frame was processed")
    probs = head.classify(head.finalize_context(st.acc), engine.att)
    return probs, int(np.argmax(probs))


def final_logits(engine: Engine, state: StreamState) -> np.ndarray:
    if state.frames == 0:
        raise StreamError("no frames processed")
    return head.logits(head.finalize_context(state.acc), engine.att)


def stream_audio(engine: Engine, audio: np.ndarray, chunk: int = 6400) -> StreamState:
    state = init_stream(engine)
    for i in range(0, len(audio), chunk):
        process_chunk(engine, state, audio[i:i + chunk])
    return state


def offline_logits(engine: Engine, audio: np.ndarray) -> np.ndarray:
    """Full-sequence reference path (no carries, no compiled kernels)."""
    audio = np.asarray(audio, dtype=engine.dtype)
    frames = frame_signal(audio, engine.n_fft, engine.hop)
    if frames.shape[0] == 0:
        raise StreamError("audio shorter than one frame")
    x = enc.stem_forward(engine.features(frames), engine.stem)
    T = x.shape[0]
    for blk in engine.blocks:
        xp = np.concatenate([np.zeros((blk.context, blk.c_in), x.dtype), x])
        u = np.zeros_like(x, dtype=np.float64) + blk.dw_bias
        K = blk.taps.shape[0]
        for j in range(K):
            lag = (K - 1 - j) * blk.dilation
            u += blk.taps[j].astype(np.float64) * xp[blk.context - lag:blk.context - lag + T]
        v = u.astype(x.dtype) @ blk.pw + blk.pw_bias
        means = np.cumsum(v.astype(np.float64), axis=0) / np.arange(1, T + 1)[:, None]
        g = enc.sigmoid(enc.relu(means.astype(x.dtype) @ blk.se_reduce + blk.se_reduce_bias)
                        @ blk.se_expand + blk.se_expand_bias)
        y = enc.relu(v * g * blk.norm_scale + blk.norm_shift)
        x = y + (x @ blk.skip + blk.skip_bias if blk.skip is not None else x)
    h = np.zeros(engine.gru.hidden, dtype=np.float64)
    g64 = head.GruParams(*(a.astype(np.float64) for a in
                           (engine.gru.w_ih, engine.gru.b_ih, engine.gru.w_hh, engine.gru.b_hh)))
    hs = np.empty((T, engine.gru.hidden))
    for t in range(T):
        h = head.gru_step(x[t].astype(np.float64), h, g64)
        h = h.astype(engine.dtype).astype(np.float64)
        hs[t] = h
    scores = hs @ engine.att.score.astype(np.float64) + engine.att.score_bias
    wts = head.softmax(scores)
    return head.logits(wts @ hs, engine.att)


def offline_predict(engine: Engine, audio: np.ndarray) -> np.ndarray:
    return head.softmax(offline_logits(engine, audio))


def transient_peak_bytes(engine: Engine, state: StreamState, chunk: np.ndarray) -> int:
    """Peak extra heap traced by ``tracemalloc`` while processing one chunk."""
    import tracemalloc

    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        process_chunk(engine, state, chunk)
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return peak - base


__all__ = [
    "Engine", "StreamState", "StreamError", "init_stream", "process_chunk", "finalize",
    "final_logits", "snapshot", "start_segment", "stream_audio", "offline_logits",
    "offline_predict", "state_nbytes", "state_layout", "transient_peak_bytes",
]
