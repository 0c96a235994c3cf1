import asyncio
import socket

import pytest

from compartbft.deploy import DeployConfig, drive_client, serve_replica
from compartbft.transport.tcp import (
    MAX_FRAME, endpoint_name, parse_address, parse_endpoint, read_frame, write_frame,
)


def free_ports(k):
    socks, ports = [], []
    for _ in range(k):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def test_endpoint_names():
    assert endpoint_name(("replica", 2)) == "replica:2"
    assert parse_endpoint("client:7") == ("client", 7)
    assert parse_address(":9000") == ("127.0.0.1", 9000)
    with pytest.raises(ValueError):
        parse_endpoint("server:1")


def test_frame_codec_round_trip():
    async def go():
        reader = asyncio.StreamReader()

        class W:
            def write(self, data):
                reader.feed_data(data)

        for payload in (b"", b"x", bytes(range(256)) * 10):
            write_frame(W(), payload)
        reader.feed_eof()
        return [await read_frame(reader) for _ in range(3)]

    assert asyncio.run(go()) == [b"", b"x", bytes(range(256)) * 10]


def test_oversized_frame_rejected():
    async def go():
        reader = asyncio.StreamReader()
        reader.feed_data((MAX_FRAME + 1).to_bytes(4, "big"))
        await read_frame(reader)

    with pytest.raises(ValueError):
        asyncio.run(go())


def test_deploy_config_yaml_round_trip():
    dc = DeployConfig.from_dict({"cluster": {"f": 1, "batch_max": 4}, "clients": 3, "key_seed": 9})
    back = DeployConfig.from_dict(__import__("yaml").safe_load(dc.dump()))
    assert back.cluster == dc.cluster and back.replicas == dc.replicas and back.clients == 3
    with pytest.raises(ValueError):
        DeployConfig.from_dict({"replicas": ["127.0.0.1:1"]})


def test_loopback_cluster_serves_clients():
    ports = free_ports(4)
    dc = DeployConfig.from_dict({"replicas": [f"127.0.0.1:{p}" for p in ports], "clients": 2, "key_seed": 3})

    async def go():
        servers = [asyncio.create_task(serve_replica(dc, r, duration=6)) for r in range(4)]
        await asyncio.sleep(0.2)
        summaries = await asyncio.gather(drive_client(dc, 0, 40, 2, timeout=5),
                                         drive_client(dc, 1, 40, 2, timeout=5))
        brokers = await asyncio.gather(*servers)
        return summaries, brokers

    summaries, brokers = asyncio.run(go())
    assert [s.completed for s in summaries] == [40, 40]
    execs = [b.enclaves[max(b.enclaves)] for b in brokers]
    assert len({e.state_digest() for e in execs if e.last_exec == execs[0].last_exec}) == 1
    assert all(line for line in summaries[0].lines())
