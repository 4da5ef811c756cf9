/** Entry point: serve one trainer session over stdio until shutdown. */

import { createInterface } from "node:readline";
import { ServerState, handleLine } from "./server.js";

export function serveStdio(): void {
  const state: ServerState = { session: null, stop: false };
  const rl = createInterface({ input: process.stdin, terminal: false });
  rl.on("line", (line) => {
    const response = handleLine(state, line);
    if (response !== null) {
      process.stdout.write(response + "\n");
    }
    if (state.stop) {
      rl.close();
      process.exit(0);
    }
  });
  rl.on("close", () => process.exit(0));
}

serveStdio();
