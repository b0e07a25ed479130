#!/usr/bin/env python3
"""User-creation candidate: creates once, then answers replays from memory.

``--plant double_write`` writes the user record again on every replay.
"""
import argparse
import hashlib

from _wire import effect, error, metrics, response, serve


class Users:
    def __init__(self, plant):
        self.plant = plant
        self.created = {}

    def __call__(self, body):
        if "username" not in body or "email" not in body:
            return [metrics(1, 16.0), error("invalid_request", "username and email are required")]
        name = body["username"]
        frames = [effect("network_call", "users-db.internal:5432")]
        if name not in self.created or self.plant == "double_write":
            frames.append(effect("fs_write", f"/var/lib/users/{name}.json", mutating=True))
            self.created[name] = "u_" + hashlib.sha256(name.encode()).hexdigest()[:12]
        frames.append(metrics(12, 24.0))
        frames.append(response({"user_id": self.created[name], "username": name}))
        return frames


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--plant", choices=("none", "double_write"), default="none")
    serve(Users(parser.parse_args().plant))


if __name__ == "__main__":
    main()
