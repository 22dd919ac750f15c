import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import type { OrderAttemptResponse } from "../src/types.js";
import type { OpenAlert } from "../src/state.js";

// resolved via node:path: the DOM test environment's URL class does not
// round-trip file:// URLs
const FIXTURES_DIR = join(dirname(fileURLToPath(import.meta.url)), "fixtures");

export function loadFixture<T>(name: string): T {
  return JSON.parse(readFileSync(join(FIXTURES_DIR, name), "utf-8")) as T;
}

/** OpenAlert as attemptResolved would build it from a displayed response. */
export function alertFromAttempt(
  response: OrderAttemptResponse,
  selectedReason: string | null = null,
): OpenAlert {
  if (!response.payload) throw new Error("fixture has no payload");
  return {
    eventId: response.alert_event_id,
    encounterId: response.order.encounter_id,
    orderId: response.order.order_id,
    payload: response.payload,
    selectedReason,
  };
}
