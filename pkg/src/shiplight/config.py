"""Pipeline configuration: a single YAML (or JSON) document mirroring
:class:`~shiplight.model.PipelineSpec`.

Validation rejects bad documents with path-precise messages before any
channel is opened. Environment overrides: ``SHIPLIGHT_SSH_IDENTITY``
replaces every host identity path, ``SHIPLIGHT_STORE_ROOT`` replaces the
store root.
"""

from __future__ import annotations

import os
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import (
    BuilderImageRef,
    ComponentKind,
    ComponentSpec,
    HealthCheckSpec,
    HostRole,
    PipelineSpec,
    RemoteHost,
    ServiceScripts,
    StoreSpec,
)


def _fail(path: str, message: str) -> None:
    raise ConfigError(f"{path}: {message}")


def _get(data: dict, key: str, path: str, kind: type, required: bool = True, default=None):
    if key not in data:
        if required:
            _fail(f"{path}.{key}", "missing required key")
        return default
    value = data[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        _fail(f"{path}.{key}", f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _as_argv(value, path: str) -> tuple[str, ...]:
    if isinstance(value, str):
        return (value,)
    if isinstance(value, list) and value and all(isinstance(v, str) for v in value):
        return tuple(value)
    _fail(path, "expected a command string or a non-empty list of strings")


def _parse_component(kind: ComponentKind, data, path: str) -> ComponentSpec:
    if not isinstance(data, dict):
        _fail(path, f"expected mapping, got {type(data).__name__}")
    image_raw = _get(data, "image", path, dict)
    image_path = f"{path}.image"
    try:
        image = BuilderImageRef(
            image=_get(image_raw, "name", image_path, str),
            tag=str(_get(image_raw, "tag", image_path, (str, int, float))),
        )
    except ValueError as exc:
        _fail(f"{image_path}.tag", str(exc))
    build = data.get("build")
    if not isinstance(build, list) or not build or not all(isinstance(b, str) for b in build):
        _fail(f"{path}.build", "expected a non-empty list of strings (argv)")
    try:
        return ComponentSpec(
            kind=kind,
            source=_get(data, "source", path, str, required=False, default="."),
            image=image,
            build=tuple(build),
            output_dir=_get(data, "output_dir", path, str, required=False, default="out"),
            timeout_s=_get(data, "timeout_s", path, float, required=False, default=1800.0),
            cache_volume=_get(data, "cache_volume", path, str, required=False, default=""),
        )
    except ValueError as exc:
        _fail(path, str(exc))


def _parse_host(data, path: str, role: HostRole) -> RemoteHost:
    if not isinstance(data, dict):
        _fail(path, f"expected mapping, got {type(data).__name__}")
    address = _get(data, "address", path, str)
    identity = _get(data, "identity", path, str, required=False, default="")
    identity = os.environ.get("SHIPLIGHT_SSH_IDENTITY", identity)
    return RemoteHost(
        address=address,
        role=role,
        port=_get(data, "port", path, int, required=False, default=22),
        user=_get(data, "user", path, str, required=False, default=""),
        identity=identity,
        known_hosts=_get(data, "known_hosts", path, str, required=False, default=""),
    )


def _parse_health(data, path: str) -> HealthCheckSpec:
    if not isinstance(data, dict):
        _fail(path, f"expected mapping, got {type(data).__name__}")
    statuses = data.get("success_statuses")
    if statuses is None:
        statuses = frozenset(range(200, 300))
    elif isinstance(statuses, list) and all(isinstance(s, int) for s in statuses):
        statuses = frozenset(statuses)
    else:
        _fail(f"{path}.success_statuses", "expected a list of integers")
    try:
        return HealthCheckSpec(
            url=_get(data, "url", path, str),
            timeout_s=_get(data, "timeout_s", path, float, required=False, default=5.0),
            attempts=_get(data, "attempts", path, int, required=False, default=5),
            delay_between_s=_get(
                data, "delay_between_s", path, float, required=False, default=2.0
            ),
            success_statuses=statuses,
        )
    except ValueError as exc:
        _fail(path, str(exc))


def _parse_sinks(data, path: str) -> tuple[dict, ...]:
    if not isinstance(data, list):
        _fail(path, f"expected list, got {type(data).__name__}")
    sinks = []
    for i, sink in enumerate(data):
        spath = f"{path}[{i}]"
        if not isinstance(sink, dict):
            _fail(spath, "expected mapping")
        stype = _get(sink, "type", spath, str)
        if stype == "file":
            _get(sink, "path", spath, str)
        elif stype == "command":
            _as_argv(sink.get("argv"), f"{spath}.argv")
        else:
            _fail(f"{spath}.type", f"unknown sink type {stype!r} (file or command)")
        sinks.append(dict(sink))
    return tuple(sinks)


def parse_spec(data: dict, base_dir: Path | None = None) -> PipelineSpec:
    """Validate a parsed document into a PipelineSpec.

    Relative filesystem paths (source, store root, runs root, scripts)
    are resolved against ``base_dir`` when given.
    """
    if not isinstance(data, dict):
        raise ConfigError("config: document root must be a mapping")

    def resolve(p: str) -> str:
        if base_dir is not None and p and not os.path.isabs(p):
            return str(base_dir / p)
        return p

    comp_raw = _get(data, "components", "config", dict)
    components: dict[ComponentKind, ComponentSpec] = {}
    for key, value in comp_raw.items():
        try:
            kind = ComponentKind(key)
        except ValueError:
            _fail(f"config.components.{key}", "unknown component kind")
        components[kind] = _parse_component(kind, value, f"config.components.{key}")
    if not components:
        _fail("config.components", "at least one component must be declared")

    source_raw = _get(data, "source", "config", dict)
    source_path = resolve(_get(source_raw, "path", "config.source", str))

    hosts_raw = _get(data, "hosts", "config", dict)
    build_host = _parse_host(hosts_raw.get("build", {"address": "local"}),
                             "config.hosts.build", HostRole.BUILD)
    deploy_host = _parse_host(hosts_raw.get("deploy", {"address": "local"}),
                              "config.hosts.deploy", HostRole.DEPLOY)

    paths_raw = _get(data, "paths", "config", dict)
    work_root = _get(paths_raw, "work_root", "config.paths", str)
    deploy_root = _get(paths_raw, "deploy_root", "config.paths", str)
    runs_root = resolve(_get(paths_raw, "runs_root", "config.paths", str,
                             required=False, default="runs"))

    # host-side roots: resolvable against the config for a local host,
    # but a remote host needs them absolute
    def host_path(value: str, host: RemoteHost, path: str) -> str:
        if os.path.isabs(value):
            return value
        if host.is_local:
            return resolve(value)
        _fail(path, f"must be absolute for remote host {host.address!r}")

    work_root = host_path(work_root, build_host, "config.paths.work_root")
    deploy_root = host_path(deploy_root, deploy_host,
                            "config.paths.deploy_root")

    store_raw = _get(data, "store", "config", dict)
    store_root = os.environ.get(
        "SHIPLIGHT_STORE_ROOT",
        resolve(_get(store_raw, "root", "config.store", str)),
    )
    store = StoreSpec(
        root=store_root,
        http_base=_get(store_raw, "http_base", "config.store", str,
                       required=False, default=""),
        max_releases=_get(store_raw, "max_releases", "config.store", int,
                          required=False, default=0),
    )

    health = None
    if "health_check" in data:
        health = _parse_health(data["health_check"], "config.health_check")

    scripts: dict[ComponentKind, ServiceScripts] = {}
    for key, value in _get(data, "scripts", "config", dict,
                           required=False, default={}).items():
        spath = f"config.scripts.{key}"
        try:
            kind = ComponentKind(key)
        except ValueError:
            _fail(spath, "unknown component kind")
        if not isinstance(value, dict):
            _fail(spath, "expected mapping with stop/start")
        scripts[kind] = ServiceScripts(
            stop=resolve(_get(value, "stop", spath, str)),
            start=resolve(_get(value, "start", spath, str)),
        )

    sinks = _parse_sinks(data.get("notifications", []), "config.notifications")

    globs_raw = data.get("config_restore_globs", [])
    if not isinstance(globs_raw, list) or not all(isinstance(g, str) for g in globs_raw):
        _fail("config.config_restore_globs", "expected a list of glob strings")

    executor = _get(data, "executor", "config", str, required=False, default="local")
    if executor not in ("local", "ssh"):
        _fail("config.executor", f"expected 'local' or 'ssh', got {executor!r}")

    allow_extra = data.get("allow_extra", [])
    if not isinstance(allow_extra, list) or not all(isinstance(a, str) for a in allow_extra):
        _fail("config.allow_extra", "expected a list of command names")

    try:
        return PipelineSpec(
            components=components,
            source_path=source_path,
            build_host=build_host,
            deploy_host=deploy_host,
            store=store,
            work_root=work_root,
            deploy_root=deploy_root,
            runs_root=runs_root,
            health_check=health,
            notification_sinks=sinks,
            backup_retention=_get(data, "backup_retention", "config", int,
                                  required=False, default=3),
            config_restore_globs=tuple(globs_raw),
            scripts=scripts,
            engine=_as_argv(data.get("engine", "shiplight-engine"), "config.engine"),
            archiver=_as_argv(data.get("archiver", "shiplight-archiver"),
                              "config.archiver"),
            parallel_builds=_get(data, "parallel_builds", "config", bool,
                                 required=False, default=False),
            executor=executor,
            concurrency=_get(data, "concurrency", "config", int,
                             required=False, default=10),
            connect_timeout_s=_get(data, "connect_timeout_s", "config", float,
                                   required=False, default=10.0),
            transfer_retries=_get(data, "transfer_retries", "config", int,
                                  required=False, default=2),
            allow_extra=tuple(allow_extra),
        )
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from exc


def load_spec(path: str | Path) -> PipelineSpec:
    """Load and validate a pipeline config file (YAML or JSON)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: {path}: invalid document: {exc}") from exc
    return parse_spec(data, base_dir=path.resolve().parent)
