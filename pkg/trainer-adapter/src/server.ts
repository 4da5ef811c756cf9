/** Request loop: one JSON object per line in, one canonical response line
 * out.  Backend exceptions become ok=false responses; the process stays
 * alive until shutdown or EOF.
 */

import { Fraction } from "./fraction.js";
import { canonicalFloat, canonicalStringify } from "./canonical.js";
import { parseDynamics } from "./dynamics.js";
import { AdapterSession, SessionError, SubDataset } from "./session.js";

const COMMANDS = new Set(["init", "shutdown", "train", "eval", "exclude", "save", "load"]);

export interface ServerState {
  session: AdapterSession | null;
  stop: boolean;
}

function need(args: any, field: string): any {
  if (args == null || !(field in args)) {
    throw new SessionError(`missing field '${field}'`);
  }
  return args[field];
}

export function handleRequest(state: ServerState, obj: any): any {
  const reqId = obj.id ?? null;
  const cmd = obj.cmd;
  const args = obj.args ?? {};
  try {
    if (typeof cmd !== "string") throw new SessionError("request needs a string 'cmd'");
    if (!COMMANDS.has(cmd)) throw new SessionError("unknown command");
    let payload: any;
    if (cmd === "init") {
      if (state.session?.initialized) throw new SessionError("already initialized");
      const dynamics = parseDynamics(need(args, "dynamics"));
      const gridStep = Fraction.parse(String(args.grid_step ?? "1/4"));
      const session = new AdapterSession(dynamics, gridStep);
      session.init(need(args, "mixture") as SubDataset[], Number(need(args, "seed")));
      state.session = session;
      payload = { position: "0" };
    } else if (cmd === "shutdown") {
      state.stop = true;
      payload = { bye: true };
    } else {
      const session = state.session;
      if (!session) throw new SessionError("session not initialized");
      if (cmd === "train") {
        const weights = new Map<string, Fraction>();
        for (const [ds, w] of Object.entries<any>(args.weights ?? {})) {
          weights.set(ds, Fraction.parse(String(w)));
        }
        session.trainDelta(
          need(args, "active") as string[],
          weights,
          Fraction.parse(String(need(args, "delta"))),
        );
        payload = { position: session.positionString() };
      } else if (cmd === "eval") {
        payload = { metric: canonicalFloat(session.evaluate(String(need(args, "ds")))) };
      } else if (cmd === "exclude") {
        session.markExcluded(String(need(args, "ds")));
        payload = { position: session.positionString() };
      } else if (cmd === "save") {
        payload = { blob: session.saveState().toString("base64") };
      } else {
        session.loadState(Buffer.from(String(need(args, "blob")), "base64"));
        payload = { position: session.positionString() };
      }
    }
    return { id: reqId, ok: true, payload };
  } catch (e) {
    const msg = e instanceof Error && e.message ? e.message : String(e);
    return { id: reqId, ok: false, error: msg };
  }
}

export function handleLine(state: ServerState, line: string): string | null {
  if (!line.trim()) return null;
  let obj: any;
  try {
    obj = JSON.parse(line);
    if (obj === null || typeof obj !== "object" || Array.isArray(obj)) {
      throw new Error("request must be a JSON object");
    }
  } catch (e) {
    const msg = e instanceof Error ? e.message : String(e);
    return canonicalStringify({ id: null, ok: false, error: `parse error: ${msg}` });
  }
  return canonicalStringify(handleRequest(state, obj));
}
