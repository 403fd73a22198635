import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    testTimeout: 120_000,
    hookTimeout: 120_000,
    // integration test spawns one real service per file; keep files serial
    fileParallelism: false,
  },
});
