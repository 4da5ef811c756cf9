/** Trainer session backed by the synthetic dynamics: the adapter-side
 * mirror of the scheduler's in-process simulator.  State is exact
 * rationals; snapshots serialize to the same canonical JSON bytes the
 * scheduler produces, so save/load round-trips across implementations.
 *
 * A real training stack would replace this class: keep the same method
 * surface, hold your own model/optimizer state, and treat `exclude` as a
 * data-pipeline change.
 */

import { Fraction } from "./fraction.js";
import { canonicalStringify } from "./canonical.js";
import { Dynamics, couplingKey, curveValue } from "./dynamics.js";

export class SessionError extends Error {}

export interface SubDataset {
  id: string;
  name: string;
  size: number;
  weight: string;
  train_tokens: number;
  eval_tokens: number;
}

interface TaskState {
  effective: Fraction;
  trained: Fraction;
  strain: Fraction;
  shift: Fraction;
  lastActive: Fraction;
}

export class AdapterSession {
  private dyn: Dynamics;
  private step: Fraction;
  private seed = 0;
  private ids: string[] = [];
  private position = Fraction.zero();
  private tasks = new Map<string, TaskState>();
  private exclusions: [string, Fraction][] = [];
  initialized = false;

  constructor(dyn: Dynamics, gridStep: Fraction) {
    this.dyn = dyn;
    this.step = gridStep;
  }

  init(mixture: SubDataset[], seed: number): void {
    if (this.initialized) throw new SessionError("already initialized");
    for (const sub of mixture) {
      if (!this.dyn.tasks.has(sub.id)) {
        throw new SessionError(
          `task '${sub.id}' has no curve parameters: mixture/config mismatch`,
        );
      }
    }
    this.ids = mixture.map((s) => s.id);
    this.seed = seed;
    this.position = Fraction.zero();
    this.tasks = new Map(
      this.ids.map((id) => [
        id,
        {
          effective: Fraction.zero(),
          trained: Fraction.zero(),
          strain: Fraction.zero(),
          shift: Fraction.zero(),
          lastActive: Fraction.zero(),
        },
      ]),
    );
    this.exclusions = [];
    this.initialized = true;
  }

  private requireInit(): void {
    if (!this.initialized) throw new SessionError("session not initialized");
  }

  private state(id: string): TaskState {
    const st = this.tasks.get(id);
    if (!st) throw new SessionError(`unknown dataset '${id}'`);
    return st;
  }

  positionString(): string {
    return this.position.toString();
  }

  trainDelta(active: string[], weights: Map<string, Fraction>, delta: Fraction): void {
    this.requireInit();
    if (active.length === 0) throw new SessionError("active set must not be empty");
    for (const id of active) this.state(id);
    if (delta.cmp(Fraction.zero()) <= 0 || !delta.mod(this.step).isZero()) {
      throw new SessionError(
        `delta_c ${delta} is not a positive multiple of the grid step ${this.step}`,
      );
    }
    const one = Fraction.fromInt(1);
    const alpha = Fraction.parse(this.dyn.upweightEfficiency);
    this.position = this.position.add(delta);
    for (const id of active) {
      const w = weights.get(id) ?? one;
      if (w.cmp(Fraction.zero()) <= 0) {
        throw new SessionError(`weight for '${id}' must be > 0`);
      }
      const gain = w.lte(one) ? w : one.add(alpha.mul(w.sub(one)));
      const st = this.state(id);
      st.effective = st.effective.add(gain.mul(delta));
      st.trained = st.trained.add(delta);
      st.strain = st.strain.add(w.sub(one).abs().mul(delta));
      st.lastActive = this.position;
    }
  }

  markExcluded(id: string): void {
    this.requireInit();
    this.state(id);
    if (this.exclusions.some(([d]) => d === id)) {
      throw new SessionError(`'${id}' already excluded`);
    }
    this.exclusions.push([id, this.position]);
    for (const other of this.ids) {
      if (other === id || this.exclusions.some(([d]) => d === other)) continue;
      const shift = this.dyn.coupling.get(couplingKey(id, other));
      if (shift) {
        const st = this.state(other);
        st.shift = st.shift.add(Fraction.parse(shift));
      }
    }
  }

  evaluate(id: string): number {
    this.requireInit();
    const st = this.state(id);
    const params = this.dyn.tasks.get(id)!;
    let penalty = 0.0;
    if (this.dyn.weightStrainPenalty !== 0.0 && st.trained.gt(Fraction.zero())) {
      const dev = st.strain.div(st.trained).toNumber();
      penalty = this.dyn.weightStrainPenalty * dev;
    }
    let v = curveValue(params, st.effective.toNumber(), st.shift.toNumber(), penalty);
    const stale = this.position.sub(st.lastActive);
    if (
      this.dyn.driftSlope !== 0.0 &&
      stale.gt(Fraction.zero()) &&
      st.effective.gt(Fraction.zero())
    ) {
      v = v + this.dyn.driftSlope * stale.toNumber();
    }
    if (v < 0.0) return 0.0;
    if (v > 1.0) return 1.0;
    return v;
  }

  saveState(): Buffer {
    this.requireInit();
    const tasks: Record<string, Record<string, string>> = {};
    for (const id of this.ids) {
      const st = this.state(id);
      tasks[id] = {
        effective: st.effective.toString(),
        trained: st.trained.toString(),
        strain: st.strain.toString(),
        shift: st.shift.toString(),
        last_active: st.lastActive.toString(),
      };
    }
    const obj = {
      v: 1,
      seed: this.seed,
      position: this.position.toString(),
      tasks,
      exclusions: this.exclusions.map(([d, at]) => [d, at.toString()]),
    };
    return Buffer.from(canonicalStringify(obj as any), "utf-8");
  }

  loadState(blob: Buffer): void {
    this.requireInit();
    let obj: any;
    try {
      obj = JSON.parse(blob.toString("utf-8"));
    } catch (e) {
      throw new SessionError(`corrupt session snapshot: ${e}`);
    }
    const ids = Object.keys(obj.tasks ?? {}).sort();
    if (obj.v !== 1 || ids.join(",") !== [...this.ids].sort().join(",")) {
      throw new SessionError("snapshot does not match this session's mixture");
    }
    this.position = Fraction.parse(obj.position);
    for (const [id, st] of Object.entries<any>(obj.tasks)) {
      const state = this.state(id);
      state.effective = Fraction.parse(st.effective);
      state.trained = Fraction.parse(st.trained);
      state.strain = Fraction.parse(st.strain);
      state.shift = Fraction.parse(st.shift);
      state.lastActive = Fraction.parse(st.last_active);
    }
    this.exclusions = (obj.exclusions as [string, string][]).map(([d, at]) => [
      d,
      Fraction.parse(at),
    ]);
  }
}
