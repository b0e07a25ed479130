#!/usr/bin/env python3
"""Fraud-score candidate for the wire protocol.

``--strategy`` picks the scoring function; ``--plant`` injects exactly one
protocol violation (or a harness misbehaviour) into an otherwise compliant
implementation.
"""
import argparse
import re
import sys
import time

from _wire import effect, error, metrics, response, serve

REQUIRED = ("transaction_id", "account_id", "amount_cents")
COUNTRY = re.compile(r"^[A-Z]{2}$")
SCALE = 1_000_000_000

PLANTS = (
    "none",
    "network",
    "tempfile",
    "feature_calls",
    "latency",
    "dependency",
    "missing_field",
    "out_of_range",
    "nondeterministic",
    "non_monotone",
    "late_effect",
    "never_handshake",
    "garbage",
    "exit_immediately",
    "hang",
)


def invalid(body):
    for name in REQUIRED:
        if name not in body:
            return f"missing {name}"
    if not isinstance(body["transaction_id"], str) or not isinstance(body["account_id"], str):
        return "identifiers must be strings"
    amount = body["amount_cents"]
    if not isinstance(amount, int) or isinstance(amount, bool) or amount < 0:
        return "amount_cents must be a non-negative integer"
    country = body.get("merchant_country")
    if country is not None and (not isinstance(country, str) or not COUNTRY.match(country)):
        return "merchant_country must be ISO-3166 alpha-2"
    return None


def linear(amount):
    return round(min(1.0, amount / SCALE), 6)


def saturating(amount):
    return round(amount / (amount + SCALE // 4), 6)


def decide(risk):
    if risk < 0.5:
        return "approve"
    return "review" if risk < 0.8 else "decline"


class Scorer:
    def __init__(self, strategy, plant):
        self.score = linear if strategy == "linear" else saturating
        self.plant = plant
        self.calls = 0

    def __call__(self, body):
        self.calls += 1
        problem = invalid(body)
        if problem:
            return [metrics(2, 32.0), error("invalid_request", problem)]

        amount = body["amount_cents"]
        frames = [
            effect("secret_access", "FEATURE_STORE_TOKEN"),
            effect("network_call", "feature-store.internal:443"),
            effect("dependency_use", "risk-common"),
        ]
        risk = self.score(amount)
        duration = 20 + amount % 40

        if self.plant == "network":
            frames.append(effect("network_call", "telemetry.example.com:443"))
        elif self.plant == "tempfile":
            frames.append(effect("fs_write", "/tmp/fraud-cache.bin", mutating=True))
        elif self.plant == "feature_calls":
            frames.append(effect("network_call", "feature-store.internal:443"))
        elif self.plant == "latency":
            duration = 150 + amount % 40
        elif self.plant == "dependency":
            frames.append(effect("dependency_use", "left-pad"))
        elif self.plant == "out_of_range":
            risk = round(risk * 2 + 0.5, 6)
        elif self.plant == "non_monotone":
            risk = 1 - amount / SCALE

        body_out = {"transaction_id": body["transaction_id"], "risk_score": risk, "decision": decide(risk)}
        if self.plant == "missing_field":
            del body_out["decision"]
        elif self.plant == "nondeterministic" and self.calls % 2:
            body_out["decision"] = "review" if body_out["decision"] != "review" else "approve"

        frames.append(metrics(duration, 48.0))
        frames.append(response(body_out))
        if self.plant == "late_effect":
            frames.append(effect("dependency_use", "risk-common"))
        if self.plant == "hang":
            time.sleep(10)
        return frames


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--strategy", choices=("linear", "saturating"), default="linear")
    parser.add_argument("--plant", choices=PLANTS, default="none")
    args = parser.parse_args()

    if args.plant == "exit_immediately":
        sys.exit(3)
    if args.plant == "never_handshake":
        for _line in sys.stdin:
            pass
        return
    if args.plant == "garbage":
        sys.stdin.readline()
        sys.stdout.write("this is not a frame\n")
        sys.stdout.flush()
        sys.stdin.read()
        return
    serve(Scorer(args.strategy, args.plant))


if __name__ == "__main__":
    main()
