/** Secondary acceptance: the console flow against a real seeded service.
 *
 * Spawns `labsentry serve` on a scratch dataset anchored at the current
 * wall clock (the service schedules off the real clock) with an always-open
 * display window, then drives the console exactly as main.ts does: API
 * client -> state reducer -> DOM render.
 */
import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import {
  actionResolved,
  attemptResolved,
  censusLoaded,
  encounterDataLoaded,
  encounterSelected,
  initialState,
  renewalCandidate,
  type ConsoleState,
} from "../src/state.js";
import { renderModal } from "../src/render.js";
import type { OrderAttemptResponse } from "../src/types.js";

const SEED_SCRIPT = `
import json, sys
from datetime import datetime, timedelta, timezone
from labsentry.cohort import CohortConfig, generate_cohort, realize_draws, train_pilot_artifact
from labsentry.fixture import FixtureStore

workdir, port = sys.argv[1], int(sys.argv[2])
now = datetime.now(timezone.utc)
start = (now - timedelta(days=2)).replace(minute=0, second=0, microsecond=0)
config = CohortConfig(n_encounters=60, seed=91, start=start, admissions_per_day=25.0)
cohort = generate_cohort(config)
store = FixtureStore.from_dataset(cohort.initial_dataset())
realize_draws(cohort, store, until=now + timedelta(hours=1))
store.dump(workdir + "/dataset.json")
train_pilot_artifact(config, n_encounters=160).save(workdir + "/artifact.json")
json.dump({
    "dataset_path": "dataset.json",
    "artifact_path": "artifact.json",
    "data_dir": "svc-data",
    "port": port,
    "timezone": "UTC",
    "trial_seed": 7,
    "alert": {"display_start": "00:00", "display_end": "23:59:59"},
}, open(workdir + "/service.json", "w"))
`;

const port = 49_152 + Math.floor(Math.random() * 14_000);
const base = `http://127.0.0.1:${port}`;
let workdir: string;
let server: ChildProcess | null = null;
const api = new ApiClient(base);

// collected by the sweep in the first test, consumed by the later ones
let displayedResponse: OrderAttemptResponse | null = null;
let silentResponse: OrderAttemptResponse | null = null;
let stateAtDisplay: ConsoleState | null = null;

async function waitForHealth(timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  let lastError = "";
  while (Date.now() < deadline) {
    try {
      const response = await fetch(`${base}/v1/health`);
      if (response.ok) {
        const body = (await response.json()) as { prediction_count: number };
        if (body.prediction_count > 0) return;
        lastError = "no predictions yet";
      }
    } catch (err) {
      lastError = String(err);
    }
    await new Promise((r) => setTimeout(r, 500));
  }
  throw new Error(`service did not come up on ${base}: ${lastError}`);
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "labsentry-console-"));
  const seedPath = join(workdir, "seed.py");
  writeFileSync(seedPath, SEED_SCRIPT);
  const seeded = spawnSync("python3", [seedPath, workdir, String(port)], {
    encoding: "utf-8",
    timeout: 90_000,
  });
  if (seeded.status !== 0) {
    throw new Error(`seeding failed: ${seeded.stderr}`);
  }
  server = spawn("labsentry", ["serve", "--config", join(workdir, "service.json")], {
    stdio: "ignore",
  });
  await waitForHealth(90_000);
});

afterAll(() => {
  server?.kill("SIGTERM");
  if (workdir) rmSync(workdir, { recursive: true, force: true });
});

describe("console flow against a live service", () => {
  it("opens the alert modal on a stable in-window treatment encounter", async () => {
    const census = await api.census();
    const hot = census.encounters.filter(
      (r) => (r.panel_probability ?? 0) > 0.9,
    );
    expect(hot.length).toBeGreaterThan(0);

    for (const row of hot) {
      let state = censusLoaded(initialState(), census.encounters);
      state = encounterSelected(state, row.encounter_id);
      const orders = await api.orders(row.encounter_id);
      state = encounterDataLoaded(state, { orders: orders.orders });
      // same flow as the console's order button: renew the encounter's
      // existing daily CBC standing order when there is one
      const response = await api.attemptOrder(
        row.encounter_id,
        "daily_or_higher",
        "console",
        renewalCandidate(state.orders),
      );
      state = attemptResolved(state, response);
      if (response.displayed && !displayedResponse) {
        displayedResponse = response;
        stateAtDisplay = state;
      }
      if (response.silently_logged && !silentResponse) {
        silentResponse = response;
      }
      if (displayedResponse && silentResponse) break;
    }

    expect(displayedResponse, "no treatment-arm display over the census").not.toBeNull();
    const alert = stateAtDisplay!.openAlert!;
    expect(alert.eventId).toBe(displayedResponse!.alert_event_id);

    const modal = renderModal(alert, {
      onAction: () => {},
      onReasonPicked: () => {},
      onClose: () => {},
    });
    const statement = modal.querySelector(".probability-statement")?.textContent;
    expect(statement).toMatch(/predicted stable with probability/);
    expect(modal.querySelector(".modal-headline")?.textContent).toContain(">90%");

    const rows = [...modal.querySelectorAll(".results-grid tr[data-component]")];
    expect(rows.map((r) => (r as HTMLElement).dataset["component"])).toEqual([
      "WBC",
      "HGB",
      "PLT",
    ]);
    for (const row of rows) {
      expect(row.querySelectorAll("td.result")).toHaveLength(3);
    }
    const payload = displayedResponse!.payload!;
    const abnormalInPayload = Object.values(payload.components)
      .flat()
      .filter((c) => c.abnormal).length;
    expect(modal.querySelectorAll("td.result.abnormal")).toHaveLength(
      abnormalInPayload,
    );

    const actions = [...modal.querySelectorAll(".modal-actions button")].map(
      (b) => (b as HTMLButtonElement).dataset["action"],
    );
    expect(actions).toEqual([
      "acknowledged_continue",
      "discontinued",
      "reduced_every_other_day",
      "reduced_weekly",
    ]);
  });

  it("Every Other Day leaves exactly one active replacement order on refresh", async () => {
    expect(displayedResponse).not.toBeNull();
    const response = await api.alertAction(
      displayedResponse!.alert_event_id,
      "reduced_every_other_day",
    );
    const closed = actionResolved(stateAtDisplay!, response);
    expect(closed.openAlert).toBeNull();
    expect(closed.history[0]?.action).toBe("reduced_every_other_day");

    const refreshed = await api.orders(
      displayedResponse!.order.encounter_id,
    );
    const original = displayedResponse!.order.order_id;
    const originalRow = refreshed.orders.find((o) => o.order_id === original);
    expect(originalRow?.status).toBe("modified");
    const active = refreshed.orders.filter((o) => o.status === "active");
    expect(active).toHaveLength(1);
    expect(active[0]!.order_id).toBe(`${original}-reduced`);
    expect(active[0]!.frequency).toBe("every_other_day");
    expect(response.replaced_order_id).toBe(original);
  });

  it("control-arm attempts show the silent-log notice, never a modal", async () => {
    expect(silentResponse, "no control-arm encounter over the census").not.toBeNull();
    let state = censusLoaded(initialState(), []);
    state = attemptResolved(state, silentResponse!);
    expect(state.openAlert).toBeNull();
    expect(state.notice).toMatch(/silently logged/);

    const census = await api.census();
    const row = census.encounters.find(
      (r) => r.encounter_id === silentResponse!.order.encounter_id,
    );
    expect(row?.arm).toBe("control");
  });
});
