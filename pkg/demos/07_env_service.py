"""Start the HTTP environment service in-process and drive an episode over it."""
from __future__ import annotations

import json
import threading
import urllib.request

from deckgym.briefs import builtin_catalog
from deckgym.harness import ServeConfig, make_server


def call(base: str, path: str, body: dict | None = None) -> dict:
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(base + path, data=data, method="POST" if data else "GET",
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=10) as resp:
        return json.loads(resp.read())


def main() -> None:
    cat = builtin_catalog()
    server = make_server(ServeConfig(port=0, catalog=cat))
    threading.Thread(target=server.serve_forever, daemon=True).start()
    base = "http://%s:%s" % server.server_address[:2]
    try:
        r = call(base, "/reset", {"brief_id": cat.ids()[0]})
        eid = r["episode_id"]
        print(r["observation_text"], "\n")
        for tc in ({"tool": "web_search", "query": "market"}, {"tool": "review_deck"}):
            s = call(base, "/step", {"episode_id": eid, "tool_call": tc})
            print(s["observation_text"].splitlines()[-1], "| info:", s["info"])
        print("\nstate:", call(base, f"/state/{eid}"))
    finally:
        server.shutdown()
        server.server_close()


if __name__ == "__main__":
    main()
