"""Stateless model service run by every instance.

Requests carry every input the computation needs, so any instance of the
same image gives the same answer. The numeric models are closed-form stubs
standing in for real hydrological codes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

from evop.errors import MalformedRequest, ModelNotServed
from evop.library import ImageDescriptor
from evop.provider import InstanceRecord


@dataclass(frozen=True)
class ModelStub:
    required: tuple[str, ...]
    fn: Callable[[Mapping[str, float]], dict[str, float]]
    compute_units: int


def _nutrient(p: Mapping[str, float]) -> dict[str, float]:
    if p["area"] <= 0:
        raise MalformedRequest("area must be positive")
    return {"flux": p["load"] / p["area"]}


STUBS: dict[str, ModelStub] = {
    "topmodel-stub": ModelStub(("a", "b"), lambda p: {"y": p["a"] * p["b"] + 1}, 3),
    "nutrient-stub": ModelStub(("load", "area"), _nutrient, 2),
    "runoff-stub": ModelStub(("rain", "coeff"), lambda p: {"q": p["rain"] * p["coeff"]}, 1),
}


def _generic(params: Mapping[str, float]) -> dict[str, float]:
    return {"sum": math.fsum(params[k] for k in sorted(params))}


@dataclass(frozen=True)
class ModelRequest:
    model_id: str
    parameters: dict[str, float]
    request_id: str

    @classmethod
    def from_dict(cls, body: object) -> "ModelRequest":
        if not isinstance(body, dict):
            raise MalformedRequest("request body must be an object")
        model_id = body.get("model_id")
        request_id = body.get("request_id")
        params = body.get("parameters", {})
        if not isinstance(model_id, str) or not model_id:
            raise MalformedRequest("model_id must be a non-empty string")
        if not isinstance(request_id, str) or not request_id:
            raise MalformedRequest("request_id must be a non-empty string")
        if not isinstance(params, dict):
            raise MalformedRequest("parameters must be an object")
        clean = {}
        for key, value in params.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise MalformedRequest(f"parameter {key!r} is not numeric")
            if not math.isfinite(value):
                raise MalformedRequest(f"parameter {key!r} is not finite")
            clean[str(key)] = value
        return cls(model_id, clean, request_id)

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "parameters": dict(self.parameters), "request_id": self.request_id}


@dataclass(frozen=True)
class ModelResult:
    request_id: str
    model_id: str
    outputs: dict[str, float]
    served_by: str
    compute_units: int

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "model_id": self.model_id,
            "outputs": dict(self.outputs),
            "served_by": self.served_by,
            "compute_units": self.compute_units,
        }


def evaluate(model_id: str, parameters: Mapping[str, float]) -> tuple[dict[str, float], int]:
    """Pure model evaluation, shared by every instance."""
    stub = STUBS.get(model_id)
    if stub is None:
        return _generic(parameters), max(1, len(parameters))
    missing = [k for k in stub.required if k not in parameters]
    if missing:
        raise MalformedRequest(f"{model_id}: missing parameters {missing}")
    return stub.fn(parameters), stub.compute_units


@dataclass
class TrafficCounters:
    requests: int = 0
    compute_units: int = 0

    def drain(self) -> tuple[int, int]:
        out = (self.requests, self.compute_units)
        self.requests = self.compute_units = 0
        return out


@dataclass
class ModelGateway:
    """The service endpoint of one instance."""

    record: InstanceRecord
    image: ImageDescriptor
    session_count: int = 0
    traffic: TrafficCounters = field(default_factory=TrafficCounters)

    def run_model(self, request: ModelRequest) -> ModelResult:
        if request.model_id not in self.image.model_ids:
            raise ModelNotServed(f"{request.model_id!r} is not served by image {self.image.image_id!r}")
        outputs, units = evaluate(request.model_id, request.parameters)
        self.traffic.requests += 1
        self.traffic.compute_units += units
        return ModelResult(request.request_id, request.model_id, outputs, self.record.instance_id, units)

    def record_traffic(self, requests: int, compute_units: int = 0) -> None:
        self.traffic.requests += requests
        self.traffic.compute_units += compute_units

    def health(self) -> dict:
        return {
            "state": self.record.state.value,
            "session_count": self.session_count,
            "image_id": self.image.image_id,
            "version": self.image.version,
        }


# -- deployed form ---------------------------------------------------------

_STATUS = {200: "200 OK", 201: "201 Created", 400: "400 Bad Request", 404: "404 Not Found", 405: "405 Method Not Allowed"}


def make_wsgi_app(gateway: ModelGateway):
    """WSGI application exposing ``/models/{id}/runs`` and ``/health``."""

    def app(environ, start_response):
        method = environ.get("REQUEST_METHOD", "GET")
        parts = [p for p in environ.get("PATH_INFO", "/").split("/") if p]
        status, body = 404, {"error": "NotFound"}
        if parts == ["health"]:
            status, body = (200, gateway.health()) if method == "GET" else (405, {"error": "MethodNotAllowed"})
        elif len(parts) == 3 and parts[0] == "models" and parts[2] == "runs":
            if method != "POST":
                status, body = 405, {"error": "MethodNotAllowed"}
            else:
                status, body = _handle_run(gateway, parts[1], environ)
        payload = json.dumps(body, sort_keys=True).encode("utf-8")
        start_response(_STATUS[status], [("Content-Type", "application/json"), ("Content-Length", str(len(payload)))])
        return [payload]

    return app


def _handle_run(gateway: ModelGateway, model_id: str, environ) -> tuple[int, dict]:
    try:
        length = int(environ.get("CONTENT_LENGTH") or 0)
        raw = environ["wsgi.input"].read(length) if length else b""
        try:
            body = json.loads(raw.decode("utf-8") or "null")
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedRequest(f"body is not JSON: {exc}") from None
        if isinstance(body, dict):
            body.setdefault("model_id", model_id)
            if body["model_id"] != model_id:
                raise MalformedRequest("model_id in body does not match the resource path")
        result = gateway.run_model(ModelRequest.from_dict(body))
    except MalformedRequest as exc:
        return 400, {"error": exc.code, "detail": str(exc)}
    except ModelNotServed as exc:
        return 404, {"error": exc.code, "detail": str(exc)}
    return 201, result.to_dict()
