"""Controller and campaign runner.

A thin client of the orchestrator's envelope protocol: start trials from a
config file, watch their state, run headless parallel campaigns, terminate
trials, and inspect logs and metrics.

Exit codes: 0 ok, 2 orchestrator unreachable, 3 invalid config, 4 campaign
aborted on a setup failure, 5 unknown trial, 6 corrupt log.
"""

from __future__ import annotations

import json
import socket
import sys
import urllib.error
import urllib.request
from dataclasses import replace

import click

from .datalog import ReplayError, replay
from .metrics import MetricsSink
from .protocol import (
    ACTOR_CLASSES,
    Envelope,
    NeedMoreBytes,
    ParticipantId,
    SchemaViolation,
    TrialParams,
    decode_frame,
    encode_frame,
    params_from_payload,
)

EXIT_OK = 0
EXIT_UNREACHABLE = 2
EXIT_INVALID_CONFIG = 3
EXIT_CAMPAIGN_ABORT = 4
EXIT_UNKNOWN_TRIAL = 5
EXIT_CORRUPT_LOG = 6

CLI_SENDER = ParticipantId("controller", "cli")


class ControlConnection:
    """Blocking envelope stream to the orchestrator."""

    def __init__(self, address: str) -> None:
        host, _, port = address.rpartition(":")
        try:
            self._sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=30)
        except (OSError, ValueError) as exc:
            raise ConnectionError(f"cannot reach orchestrator at {address}: {exc}") from exc
        self._buffer = bytearray()

    def send(self, msg_type: str, trial_id: str = "", tick_id: int = 0, payload: dict | None = None) -> None:
        envelope = Envelope(msg_type=msg_type, trial_id=trial_id, tick_id=tick_id,
                            sender=CLI_SENDER, payload=payload or {})
        self._sock.sendall(encode_frame(envelope))

    def recv(self, timeout: float | None = None) -> Envelope | None:
        self._sock.settimeout(timeout)
        while True:
            try:
                envelope, consumed = decode_frame(self._buffer)
            except NeedMoreBytes:
                chunk = self._sock.recv(65536)
                if not chunk:
                    return None
                self._buffer.extend(chunk)
                continue
            del self._buffer[:consumed]
            return envelope

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def _load_params(config_file: str) -> TrialParams:
    try:
        with open(config_file, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        click.echo(f"config: {exc}", err=True)
        sys.exit(EXIT_INVALID_CONFIG)
    try:
        return params_from_payload(payload)
    except SchemaViolation as exc:
        click.echo(f"config: {exc.path}: {exc.detail}", err=True)
        sys.exit(EXIT_INVALID_CONFIG)


def _connect(address: str) -> ControlConnection:
    try:
        return ControlConnection(address)
    except ConnectionError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_UNREACHABLE)


@click.group()
@click.option("--orchestrator", "address", default="127.0.0.1:9000", show_default=True,
              help="Orchestrator envelope endpoint (host:port).")
@click.pass_context
def main(ctx: click.Context, address: str) -> None:
    """Trial controller and campaign runner."""
    ctx.obj = {"address": address}


@main.command()
@click.argument("config_file", type=click.Path())
@click.pass_context
def start(ctx: click.Context, config_file: str) -> None:
    """Start one trial from CONFIG_FILE and print its id."""
    params = _load_params(config_file)
    conn = _connect(ctx.obj["address"])
    try:
        conn.send("start_trial", payload={"params": params.to_payload()})
        reply = conn.recv()
        if reply is None:
            click.echo("connection closed", err=True)
            sys.exit(EXIT_UNREACHABLE)
        if reply.msg_type == "error":
            detail = reply.payload.get("path") or reply.payload.get("detail", "")
            click.echo(f"rejected: {detail}", err=True)
            sys.exit(EXIT_INVALID_CONFIG)
        click.echo(reply.trial_id)
    finally:
        conn.close()


@main.command()
@click.argument("trial_id", required=False)
@click.option("--all", "watch_all", is_flag=True, help="Watch every trial.")
@click.pass_context
def watch(ctx: click.Context, trial_id: str | None, watch_all: bool) -> None:
    """Stream state transitions: one line per transition."""
    if not watch_all and not trial_id:
        raise click.UsageError("pass a TRIAL_ID or --all")
    conn = _connect(ctx.obj["address"])
    filt = "*" if watch_all else trial_id
    try:
        conn.send("join_trial", payload={"watch": filt})
        ack = conn.recv()
        if ack is None or ack.msg_type == "error":
            click.echo(f"unknown trial {filt}", err=True)
            sys.exit(EXIT_UNKNOWN_TRIAL)
        pending: set[str] = set()
        seen_any = False
        while True:
            event = conn.recv()
            if event is None:
                break
            if event.msg_type != "trial_state":
                continue
            state = event.payload.get("state")
            reason = event.payload.get("reason")
            click.echo(f"{event.trial_id} {state} {reason or '-'}")
            seen_any = True
            if state == "ended":
                pending.discard(event.trial_id)
            else:
                pending.add(event.trial_id)
            if seen_any and not pending:
                break
    finally:
        conn.close()


@main.command()
@click.argument("trial_id")
@click.pass_context
def terminate(ctx: click.Context, trial_id: str) -> None:
    """Request termination and wait for the trial to end."""
    conn = _connect(ctx.obj["address"])
    try:
        conn.send("end_trial", trial_id=trial_id, payload={"reason": "client_requested"})
        reply = conn.recv()
        if reply is None or reply.msg_type == "error":
            click.echo(f"unknown trial {trial_id}", err=True)
            sys.exit(EXIT_UNKNOWN_TRIAL)
        click.echo(f"{trial_id} ended {reply.payload.get('reason')}")
    finally:
        conn.close()


@main.command()
@click.argument("config_file", type=click.Path())
@click.option("--parallel", "-p", default=1, show_default=True, help="Trials kept in flight.")
@click.option("--trials", "-n", "total", default=1, show_default=True, help="Trials to run.")
@click.option("--base-seed", default=0, show_default=True,
              help="Trial i runs with seed base+i.")
@click.option("--threshold", default=0.5, show_default=True,
              help="Trained threshold for the summary table.")
@click.option("--trial-prefix", default="", help="Explicit trial ids <prefix>-<index>.")
@click.pass_context
def campaign(ctx: click.Context, config_file: str, parallel: int, total: int,
             base_seed: int, threshold: float, trial_prefix: str) -> None:
    """Run TOTAL trials with PARALLEL in flight; print the metrics summary."""
    if parallel < 1 or total < 1:
        raise click.UsageError("--parallel and --trials must be >= 1")
    template = _load_params(config_file)
    acting_impls = {
        slot.actor_name: slot.implementation
        for slot in template.actor_slots
        if ACTOR_CLASSES[slot.class_name].acts
    }
    watch_conn = _connect(ctx.obj["address"])
    control_conn = _connect(ctx.obj["address"])
    index_by_id: dict[str, int] = {}
    totals_by_index: dict[int, dict[str, float]] = {}
    started = 0

    def start_next() -> None:
        nonlocal started
        index = started
        params = replace(
            template,
            trial_id=f"{trial_prefix}-{index:04d}" if trial_prefix else "",
            seed=(base_seed + index) & 0xFFFFFFFFFFFFFFFF,
        )
        control_conn.send("start_trial", payload={"params": params.to_payload()})
        reply = control_conn.recv()
        if reply is None or reply.msg_type == "error":
            detail = reply.payload if reply is not None else "connection closed"
            click.echo(f"trial {index} rejected: {detail}", err=True)
            sys.exit(EXIT_INVALID_CONFIG)
        index_by_id[reply.trial_id] = index
        started += 1

    try:
        watch_conn.send("join_trial", payload={"watch": "*"})
        ack = watch_conn.recv()
        if ack is None or ack.msg_type != "join_ack":
            click.echo("watch subscription failed", err=True)
            sys.exit(EXIT_UNREACHABLE)
        for _ in range(min(parallel, total)):
            start_next()
        while len(totals_by_index) < total:
            event = watch_conn.recv()
            if event is None:
                click.echo("orchestrator connection lost", err=True)
                sys.exit(EXIT_UNREACHABLE)
            if event.msg_type != "trial_state" or event.payload.get("state") != "ended":
                continue
            index = index_by_id.get(event.trial_id)
            if index is None or index in totals_by_index:
                continue
            if event.payload.get("reason") == "setup_failed":
                click.echo(f"trial {event.trial_id} failed setup; aborting campaign", err=True)
                sys.exit(EXIT_CAMPAIGN_ABORT)
            totals_by_index[index] = event.payload.get("totals", {})
            if started < total:
                start_next()
    finally:
        watch_conn.close()
        control_conn.close()

    sink = MetricsSink(threshold=threshold)
    for index in range(total):
        totals = totals_by_index[index]
        for actor_name, implementation in acting_impls.items():
            sink.record_trial_total(implementation, totals.get(actor_name, 0.0))
    click.echo(sink.render_table(threshold), nl=False)


@main.command(name="replay")
@click.argument("log_path", type=click.Path())
@click.option("--summary", "mode", flag_value="summary", default=True)
@click.option("--rewards", "rewards_actor", default=None,
              help="Print per-target-tick aggregated rewards for one actor.")
@click.pass_context
def replay_cmd(ctx: click.Context, log_path: str, mode: str, rewards_actor: str | None) -> None:
    """Inspect a trial log: --summary or --rewards ACTOR."""
    try:
        log = replay(log_path)
    except ReplayError as exc:
        click.echo(f"corrupt log at byte {exc.offset}", err=True)
        sys.exit(EXIT_CORRUPT_LOG)
    except OSError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_CORRUPT_LOG)
    if log.header is None:
        click.echo("corrupt log at byte 0", err=True)
        sys.exit(EXIT_CORRUPT_LOG)

    if rewards_actor is not None:
        for agg in log.aggregate_table():
            if agg.actor == rewards_actor:
                sources = ",".join(f"{p.kind}:{p.name}" for p in agg.sources)
                click.echo(f"{agg.target_tick} {agg.value:.9g} {agg.total_confidence:.9g} {sources}")
        return

    click.echo(f"trial: {log.header['params'].get('trial_id', '?')}")
    click.echo(f"ticks: {log.total_ticks}")
    click.echo(f"reason: {log.end_reason or 'truncated'}")
    for actor, total in sorted(log.totals().items()):
        click.echo(f"total {actor} {total:.9g}")
    if log.truncated:
        click.echo("(truncated)")


@main.command()
@click.option("--url", default="http://127.0.0.1:9001/metrics", show_default=True)
@click.option("--threshold", default=None, type=float, help="Override the trained threshold.")
def metrics(url: str, threshold: float | None) -> None:
    """Fetch and print the orchestrator's metrics table."""
    if threshold is not None:
        url = f"{url}?threshold={threshold}"
    try:
        with urllib.request.urlopen(url, timeout=10) as response:
            click.echo(response.read().decode("utf-8"), nl=False)
    except (urllib.error.URLError, OSError) as exc:
        click.echo(f"cannot fetch metrics: {exc}", err=True)
        sys.exit(EXIT_UNREACHABLE)


if __name__ == "__main__":
    main()
