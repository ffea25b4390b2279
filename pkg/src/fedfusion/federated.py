"""Synchronous FedAvg over two interchangeable transports.

The server drives lockstep rounds: broadcast the global model, collect one
update per registered client, aggregate by sample count in ascending
client_id order. Transports are "inproc" (clients are local objects) and
"tcp" (length-prefixed binary frames); the parameter codec is bit-exact, so
the two transports produce bitwise-identical models.

Wire format: every frame is a 4-byte little-endian payload length, one type
byte, then the payload. Model parameters serialize as a u32 layer count and,
per layer, u32 rows, u32 cols, u8 activation tag, then row-major float64
weights followed by the bias vector.
"""

import socket
import struct
import threading
from dataclasses import dataclass, replace

import numpy as np

from .errors import CodecError, ConfigError, ProtocolError
from .nn import Layer, ModelParams, TrainConfig, init_params, train

MSG_REGISTER = 0
MSG_MODEL = 1
MSG_UPDATE = 2
MSG_DONE = 3
MSG_ERROR = 4

_ACT_TAG = {"relu": 0, "sigmoid": 1, "identity": 2}
_TAG_ACT = {v: k for k, v in _ACT_TAG.items()}

_MAX_PAYLOAD = 1 << 30
_ACCEPT_TIMEOUT_S = 120.0


# ---------------------------------------------------------------------------
# parameter codec

def encode_params(params):
    """Serialize ModelParams to the canonical byte layout (bit-exact)."""
    out = [struct.pack("<I", len(params.layers))]
    for layer in params.layers:
        if layer.activation not in _ACT_TAG:
            raise CodecError(f"unknown activation {layer.activation!r}")
        n_out, n_in = layer.weights.shape
        out.append(struct.pack("<IIB", n_out, n_in, _ACT_TAG[layer.activation]))
        out.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CodecError(
                f"truncated buffer: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def expect_end(self):
        if self.pos != len(self.buf):
            raise CodecError(f"{len(self.buf) - self.pos} trailing bytes")


def _decode_params_reader(r):
    (n_layers,) = struct.unpack("<I", r.take(4))
    if n_layers == 0:
        raise CodecError("model with zero layers")
    layers = []
    for _ in range(n_layers):
        n_out, n_in, tag = struct.unpack("<IIB", r.take(9))
        if tag not in _TAG_ACT:
            raise CodecError(f"unknown activation tag {tag}")
        w = np.frombuffer(r.take(8 * n_out * n_in), dtype="<f8").reshape(n_out, n_in)
        b = np.frombuffer(r.take(8 * n_out), dtype="<f8")
        layers.append(Layer(w.copy(), b.copy(), _TAG_ACT[tag]))
    return ModelParams(layers)


def decode_params(buf):
    r = _Reader(buf)
    params = _decode_params_reader(r)
    r.expect_end()
    return params


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _unpack_str(r):
    (n,) = struct.unpack("<I", r.take(4))
    return r.take(n).decode("utf-8")


# ---------------------------------------------------------------------------
# protocol types and message codecs

@dataclass
class FedConfig:
    rounds: int
    local_epochs: int
    train: TrainConfig
    expected_clients: int
    hidden_dims: tuple = (64, 32)

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.expected_clients < 1:
            raise ConfigError(f"expected_clients must be >= 1, got {self.expected_clients}")
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        if any(d < 1 for d in self.hidden_dims):
            raise ConfigError(f"hidden dims must be >= 1, got {self.hidden_dims}")


@dataclass
class RoundUpdate:
    client_id: str
    round: int
    params: ModelParams
    sample_count: int
    loss: float = 0.0

    def __post_init__(self):
        if self.round < 0:
            raise ProtocolError(f"round must be >= 0, got {self.round}")
        if self.sample_count < 1:
            raise ProtocolError(f"sample_count must be >= 1, got {self.sample_count}")


def encode_register(client_id, sample_count, column_labels):
    parts = [_pack_str(client_id), struct.pack("<QI", sample_count, len(column_labels))]
    parts.extend(_pack_str(lbl) for lbl in column_labels)
    return b"".join(parts)


def decode_register(buf):
    r = _Reader(buf)
    client_id = _unpack_str(r)
    sample_count, n_labels = struct.unpack("<QI", r.take(12))
    labels = [_unpack_str(r) for _ in range(n_labels)]
    r.expect_end()
    return client_id, sample_count, labels


def encode_broadcast(round_no, local_epochs, params):
    return struct.pack("<II", round_no, local_epochs) + encode_params(params)


def decode_broadcast(buf):
    r = _Reader(buf)
    round_no, local_epochs = struct.unpack("<II", r.take(8))
    params = _decode_params_reader(r)
    r.expect_end()
    return round_no, local_epochs, params


def encode_update(update):
    return (
        _pack_str(update.client_id)
        + struct.pack("<IQd", update.round, update.sample_count, update.loss)
        + encode_params(update.params)
    )


def decode_update(buf):
    r = _Reader(buf)
    client_id = _unpack_str(r)
    round_no, sample_count, loss = struct.unpack("<IQd", r.take(20))
    params = _decode_params_reader(r)
    r.expect_end()
    return RoundUpdate(client_id, round_no, params, sample_count, loss)


# ---------------------------------------------------------------------------
# framing

def send_message(sock, mtype, payload):
    sock.sendall(struct.pack("<I", len(payload)) + bytes([mtype]) + payload)


def _recv_exact(sock, n):
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ProtocolError("connection closed mid-message")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_message(sock):
    head = _recv_exact(sock, 5)
    (length,) = struct.unpack("<I", head[:4])
    if length > _MAX_PAYLOAD:
        raise ProtocolError(f"payload of {length} bytes exceeds limit")
    return head[4], _recv_exact(sock, length)


# ---------------------------------------------------------------------------
# aggregation

def fedavg_aggregate(updates):
    """Sample-count-weighted average in ascending client_id order.

    Computed as base + sum_k c_k (theta_k - base) with the first client as
    base, so a unanimous round returns the shared parameters unchanged.
    """
    if not updates:
        raise ProtocolError("no updates to aggregate")
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise ProtocolError(f"mixed rounds in aggregation: {sorted(rounds)}")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids: {sorted(ids)}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    base = ordered[0].params
    shape_of = lambda p: [(l.weights.shape, l.activation) for l in p.layers]
    want = shape_of(base)
    for u in ordered[1:]:
        if shape_of(u.params) != want:
            raise ProtocolError(f"client {u.client_id!r}: parameter shapes differ")
    if len(ordered) == 1:
        return base.copy()
    total = float(sum(u.sample_count for u in ordered))
    agg = base.copy()
    for u in ordered[1:]:
        c = u.sample_count / total
        for agg_layer, u_layer, base_layer in zip(agg.layers, u.params.layers, base.layers):
            agg_layer.weights += c * (u_layer.weights - base_layer.weights)
            agg_layer.bias += c * (u_layer.bias - base_layer.bias)
    return agg


# ---------------------------------------------------------------------------
# client

class FedClient:
    """Local training state for one participant.

    The rng and optimizer state persist across rounds, so a single-client
    federation is bitwise-identical to uninterrupted local training.
    """

    def __init__(self, client_id, x, y, weights, column_labels):
        self.client_id = client_id
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ConfigError(f"bad client data shapes {self.x.shape} / {self.y.shape}")
        self.weights = weights
        self.column_labels = list(column_labels)
        self.params = None
        self.rng = None
        self.opt_state = None

    @property
    def sample_count(self):
        return self.x.shape[0]

    def receive_model(self, params):
        self.params = params.copy()

    def train_round(self, round_no, local_epochs, train_cfg):
        if self.params is None:
            raise ProtocolError("no model received before training")
        if self.rng is None:
            self.rng = np.random.default_rng(train_cfg.rng_seed)
        step_cfg = replace(train_cfg, epochs=local_epochs)
        self.params, self.opt_state, losses = train(
            self.params, self.x, self.y, self.weights, step_cfg,
            rng=self.rng, opt_state=self.opt_state,
        )
        return RoundUpdate(
            self.client_id, round_no, self.params.copy(), self.sample_count, losses[-1]
        )


# ---------------------------------------------------------------------------
# server round loop over transport-agnostic client handles

class _LocalClientHandle:
    def __init__(self, client, cfg):
        self.client = client
        self.cfg = cfg
        self._round = None

    def register(self):
        return self.client.client_id, self.client.sample_count, self.client.column_labels

    def send_model(self, params, round_no):
        self.client.receive_model(params)
        self._round = round_no

    def collect_update(self):
        return self.client.train_round(self._round, self.cfg.local_epochs, self.cfg.train)

    def finish(self, params):
        self.client.receive_model(params)

    def fail(self, message):
        pass


class _RemoteClientHandle:
    def __init__(self, conn, cfg):
        self.conn = conn
        self.cfg = cfg
        self.client_id = None
        self._round = None

    def register(self):
        mtype, payload = recv_message(self.conn)
        if mtype != MSG_REGISTER:
            raise ProtocolError(f"expected Register, got message type {mtype}")
        client_id, sample_count, labels = decode_register(payload)
        self.client_id = client_id
        return client_id, sample_count, labels

    def send_model(self, params, round_no):
        self._round = round_no
        send_message(
            self.conn, MSG_MODEL, encode_broadcast(round_no, self.cfg.local_epochs, params)
        )

    def collect_update(self):
        try:
            mtype, payload = recv_message(self.conn)
        except ProtocolError as exc:
            raise ProtocolError(
                f"client {self.client_id!r} disconnected during round {self._round}"
            ) from exc
        if mtype == MSG_ERROR:
            raise ProtocolError(
                f"client {self.client_id!r} failed in round {self._round}: "
                f"{payload.decode('utf-8', 'replace')}"
            )
        if mtype != MSG_UPDATE:
            raise ProtocolError(f"expected Update, got message type {mtype}")
        update = decode_update(payload)
        if update.round != self._round:
            raise ProtocolError(
                f"client {self.client_id!r} answered round {update.round}, "
                f"expected {self._round}"
            )
        if update.client_id != self.client_id:
            raise ProtocolError(
                f"update from {update.client_id!r} on {self.client_id!r}'s connection"
            )
        return update

    def finish(self, params):
        send_message(self.conn, MSG_DONE, encode_params(params))

    def fail(self, message):
        try:
            send_message(self.conn, MSG_ERROR, message.encode("utf-8"))
        except OSError:
            pass


def _run_rounds(handles, cfg):
    """Registration, lockstep rounds, final broadcast. Shared by transports."""
    regs = [h.register() for h in handles]
    ids = [cid for cid, _, _ in regs]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids at registration: {sorted(ids)}")
    ref_id, _, ref_labels = regs[0]
    for cid, _, labels in regs[1:]:
        if labels != ref_labels:
            raise ProtocolError(
                f"client {cid!r}: shared-feature column layout differs from {ref_id!r}"
            )
    dims = [len(ref_labels), *cfg.hidden_dims, 1]
    activations = ["relu"] * (len(dims) - 2) + ["sigmoid"]
    global_params = init_params(dims, activations, cfg.train.rng_seed)
    history = []
    for round_no in range(cfg.rounds):
        for h in handles:
            h.send_model(global_params, round_no)
        updates = [h.collect_update() for h in handles]
        global_params = fedavg_aggregate(updates)
        history.append(
            {u.client_id: u.loss for u in sorted(updates, key=lambda u: u.client_id)}
        )
    for h in handles:
        h.finish(global_params)
    return global_params, history


# ---------------------------------------------------------------------------
# transports

def _serve_on(server_sock, cfg):
    server_sock.settimeout(_ACCEPT_TIMEOUT_S)
    conns = []
    try:
        while len(conns) < cfg.expected_clients:
            try:
                conn, _ = server_sock.accept()
            except socket.timeout:
                raise ProtocolError(
                    f"only {len(conns)} of {cfg.expected_clients} clients connected"
                ) from None
            conn.settimeout(None)
            conns.append(conn)
        handles = [_RemoteClientHandle(conn, cfg) for conn in conns]
        try:
            return _run_rounds(handles, cfg)
        except Exception as exc:
            for h in handles:
                h.fail(str(exc))
            raise
    finally:
        for conn in conns:
            conn.close()


def serve_federated(cfg, host="127.0.0.1", port=0, on_listening=None):
    """Run one federation session over TCP; returns (params, history).

    Blocks until expected_clients have connected and all rounds complete.
    `on_listening` (if given) receives the bound port before accepting.
    """
    with socket.create_server((host, port)) as server_sock:
        if on_listening is not None:
            on_listening(server_sock.getsockname()[1])
        return _serve_on(server_sock, cfg)


def join_federated(host, port, client, train_cfg):
    """Connect a FedClient to a server and follow its rounds to completion.

    Returns the final global ModelParams (also left on the client).
    """
    try:
        sock = socket.create_connection((host, port), timeout=30.0)
    except OSError as exc:
        raise ProtocolError(f"cannot reach server at {host}:{port}: {exc}") from None
    with sock:
        sock.settimeout(None)
        send_message(
            sock,
            MSG_REGISTER,
            encode_register(client.client_id, client.sample_count, client.column_labels),
        )
        while True:
            mtype, payload = recv_message(sock)
            if mtype == MSG_MODEL:
                round_no, local_epochs, params = decode_broadcast(payload)
                client.receive_model(params)
                update = client.train_round(round_no, local_epochs, train_cfg)
                send_message(sock, MSG_UPDATE, encode_update(update))
            elif mtype == MSG_DONE:
                final = decode_params(payload)
                client.receive_model(final)
                return final
            elif mtype == MSG_ERROR:
                raise ProtocolError(
                    f"server error: {payload.decode('utf-8', 'replace')}"
                )
            else:
                raise ProtocolError(f"unexpected message type {mtype}")


def run_federated(clients, cfg, transport="inproc"):
    """Train a shared model across clients; returns (params, history)."""
    if not clients:
        raise ConfigError("need at least one client")
    if len(clients) != cfg.expected_clients:
        raise ConfigError(
            f"{len(clients)} clients but expected_clients = {cfg.expected_clients}"
        )
    if transport == "inproc":
        return _run_rounds([_LocalClientHandle(c, cfg) for c in clients], cfg)
    if transport != "tcp":
        raise ConfigError(f"unknown transport {transport!r}")

    with socket.create_server(("127.0.0.1", 0)) as server_sock:
        port = server_sock.getsockname()[1]
        failures = []

        def run_client(client):
            try:
                join_federated("127.0.0.1", port, client, cfg.train)
            except Exception as exc:  # surfaced after the session
                failures.append((client.client_id, exc))

        threads = [
            threading.Thread(target=run_client, args=(c,), daemon=True) for c in clients
        ]
        for t in threads:
            t.start()
        try:
            result = _serve_on(server_sock, cfg)
        finally:
            for t in threads:
                t.join(timeout=60.0)
        if failures:
            cid, exc = failures[0]
            raise ProtocolError(f"client {cid!r} failed: {exc}") from exc
        return result
