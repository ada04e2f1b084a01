import pytest

from flatproxy.core import FlowKey, Metadata, Proto, TrafficUnit, UnitKind


EXAMPLE_CONFIG = "configs/http_routing.yaml"


def make_flow(sip="1.1.1.1", sport=40000, dip="10.0.0.2", dport=8080):
    from flatproxy.core import ip4_to_int

    return FlowKey(
        sip=ip4_to_int(sip), sport=sport, dip=ip4_to_int(dip), dport=dport,
        proto=Proto.TCP,
    )


def make_request(path=b"/svc/a", host=b"x", body=b"", method=b"GET",
                 extra_headers=()):
    lines = [method + b" " + path + b" HTTP/1.1", b"Host: " + host]
    for h in extra_headers:
        lines.append(h)
    if body:
        lines.append(b"Content-Length: " + str(len(body)).encode())
    return b"\r\n".join(lines) + b"\r\n\r\n" + body


def make_message(payload, flow=None, conn_id=1):
    flow = flow or make_flow()
    return TrafficUnit(
        kind=UnitKind.MESSAGE,
        meta=Metadata(flow=flow, conn_id=conn_id),
        payload=payload,
    )


@pytest.fixture
def example_config_path():
    return EXAMPLE_CONFIG


def config_text(endpoint_ports=(9001, 9002), policy="ROUND_ROBIN",
                dip="10.0.0.2", dport=8080, filters=True,
                path_pattern="/svc/", endpoint_host="127.0.0.1"):
    eps = "\n".join(
        f"      - address: {endpoint_host}\n        port: {p}\n        weight: 1"
        for p in endpoint_ports
    )
    filt = (
        "filters:\n  - decision: DENY\n    path_prefix: /admin\n" if filters else ""
    )
    return f"""
listeners:
  - name: web
    dip: {dip}
    dport: {dport}
{filt}routes:
  - listener: web
    path_matchers:
      - kind: PREFIX
        pattern: {path_pattern}
    cluster: backend
clusters:
  - ref: backend
    policy: {policy}
    endpoints:
{eps}
"""
