/** Boots the real Python service for the integration tests and tears it
 * down afterwards. Tests read the base URL from SPINENAV_TEST_URL. */

import { spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

const PORT = 8943;
const URL = `http://127.0.0.1:${PORT}`;

let server: ChildProcess | null = null;
let dataDir: string | null = null;

async function waitReady(url: string, timeoutMs = 30000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const res = await fetch(`${url}/api/v1/sessions`);
      if (res.ok) return;
    } catch {
      /* not up yet */
    }
    await new Promise((r) => setTimeout(r, 200));
  }
  throw new Error(`service at ${url} not ready after ${timeoutMs}ms`);
}

export async function setup(): Promise<void> {
  dataDir = mkdtempSync(join(tmpdir(), "spinenav-ui-test-"));
  const code = [
    "import uvicorn",
    "from spinenav.service import create_app",
    `app = create_app(data_dir=${JSON.stringify(dataDir)})`,
    `uvicorn.run(app, host='127.0.0.1', port=${PORT}, log_level='warning')`,
  ].join("\n");
  server = spawn("python3", ["-c", code], { stdio: "inherit" });
  server.on("exit", (codeNum) => {
    if (codeNum !== null && codeNum !== 0) {
      console.error(`service exited with code ${codeNum}`);
    }
  });
  await waitReady(URL);
  process.env["SPINENAV_TEST_URL"] = URL;
}

export async function teardown(): Promise<void> {
  if (server && !server.killed) {
    server.kill("SIGTERM");
    await new Promise((r) => setTimeout(r, 300));
    if (server.exitCode === null) server.kill("SIGKILL");
  }
  if (dataDir) rmSync(dataDir, { recursive: true, force: true });
}
