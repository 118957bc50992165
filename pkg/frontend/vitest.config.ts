import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    globalSetup: ["./tests/global-setup.ts"],
    testTimeout: 30000,
    hookTimeout: 60000,
    // integration tests share one live service; run files sequentially
    fileParallelism: false,
  },
});
