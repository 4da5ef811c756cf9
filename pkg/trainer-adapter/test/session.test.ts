import { describe, expect, it } from "vitest";
import { readFileSync } from "node:fs";
import { join } from "node:path";

import { canonicalFloat } from "../src/canonical.js";
import { parseDynamics } from "../src/dynamics.js";
import { Fraction } from "../src/fraction.js";
import { AdapterSession } from "../src/session.js";

const fixtures = JSON.parse(
  readFileSync(join(__dirname, "fixtures.json"), "utf-8"),
);

function freshSession(): AdapterSession {
  const session = new AdapterSession(
    parseDynamics(fixtures.dynamics),
    Fraction.parse("1/4"),
  );
  session.init(fixtures.mixture, 20);
  return session;
}

describe("AdapterSession", () => {
  it("replays the scheduler-generated script with identical metrics", () => {
    const session = freshSession();
    let saved: Buffer | null = null;
    for (const step of fixtures.script) {
      if (step.op === "eval_all") {
        for (const [ds, want] of Object.entries<string>(step.want)) {
          expect(canonicalFloat(session.evaluate(ds))).toBe(want);
        }
      } else if (step.op === "train") {
        const weights = new Map<string, Fraction>();
        for (const [ds, w] of Object.entries<string>(step.weights)) {
          weights.set(ds, Fraction.parse(w));
        }
        session.trainDelta(step.active, weights, Fraction.parse(step.delta));
      } else if (step.op === "save") {
        saved = session.saveState();
        expect(saved.toString("utf-8")).toBe(step.want_blob);
      } else if (step.op === "exclude") {
        session.markExcluded(step.ds);
      } else if (step.op === "load_saved") {
        session.loadState(saved!);
      }
    }
  });

  it("enforces the session contract", () => {
    const session = freshSession();
    expect(() => session.init(fixtures.mixture, 20)).toThrow("already initialized");
    expect(() => session.trainDelta([], new Map(), Fraction.parse("1/4"))).toThrow(
      "active set must not be empty",
    );
    expect(() =>
      session.trainDelta(["alpha"], new Map(), Fraction.parse("3/10")),
    ).toThrow("not a positive multiple");
    expect(() => session.evaluate("nope")).toThrow("unknown dataset 'nope'");
    session.markExcluded("alpha");
    expect(() => session.markExcluded("alpha")).toThrow("already excluded");
  });

  it("round-trips snapshots", () => {
    const session = freshSession();
    session.trainDelta(["alpha", "beta", "gamma"], new Map(), Fraction.parse("1/2"));
    const blob = session.saveState();
    session.trainDelta(["alpha"], new Map(), Fraction.parse("1/4"));
    session.loadState(blob);
    expect(session.saveState().equals(blob)).toBe(true);
    expect(session.positionString()).toBe("1/2");
  });

  it("rejects snapshots from another mixture", () => {
    const session = freshSession();
    expect(() =>
      session.loadState(Buffer.from('{"v":1,"tasks":{},"position":"0","exclusions":[]}')),
    ).toThrow("does not match");
  });
});
