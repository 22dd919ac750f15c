import { describe, expect, it } from "vitest";
import {
  actionResolved,
  attemptResolved,
  bannerDismissed,
  bannerPushed,
  canSubmit,
  censusLoaded,
  encounterDataLoaded,
  encounterSelected,
  initialState,
  isStale,
  noticeDismissed,
  reasonPicked,
  renewalCandidate,
  type ConsoleState,
} from "../src/state.js";
import type {
  ActionResponse,
  CensusResponse,
  LabsResponse,
  OrderAttemptResponse,
  OrdersResponse,
  PredictionResponse,
} from "../src/types.js";
import { loadFixture } from "./helpers.js";

const displayed = loadFixture<OrderAttemptResponse>("attempt-displayed.json");
const silent = loadFixture<OrderAttemptResponse>("attempt-silent.json");
const gateFailed = loadFixture<OrderAttemptResponse>("attempt-gate-failed.json");
const reduce = loadFixture<ActionResponse>("action-reduce.json");
const census = loadFixture<CensusResponse>("census.json");
const labs = loadFixture<LabsResponse>("labs.json");
const orders = loadFixture<OrdersResponse>("orders-after-reduce.json");
const prediction = loadFixture<PredictionResponse>("prediction.json");

function selected(): ConsoleState {
  return encounterSelected(
    censusLoaded(initialState(), census.encounters),
    displayed.order.encounter_id,
  );
}

describe("attemptResolved", () => {
  it("opens the modal from a displayed response", () => {
    const state = attemptResolved(selected(), displayed);
    expect(state.openAlert).not.toBeNull();
    expect(state.openAlert?.eventId).toBe(displayed.alert_event_id);
    expect(state.openAlert?.payload).toBe(displayed.payload);
    expect(state.openAlert?.selectedReason).toBeNull();
    expect(state.lastDecision?.show).toBe(true);
    expect(state.notice).toBeNull();
  });

  it("never allows a second open modal", () => {
    const state = attemptResolved(selected(), displayed);
    expect(() => attemptResolved(state, displayed)).toThrow(/at most one/);
  });

  it("turns a control-arm response into the silent-log notice", () => {
    const state = attemptResolved(selected(), silent);
    expect(state.openAlert).toBeNull();
    expect(state.notice).toMatch(/silently logged/);
    expect(state.notice).toMatch(/control arm/);
  });

  it("surfaces gate reasons when nothing displays", () => {
    const state = attemptResolved(selected(), gateFailed);
    expect(state.openAlert).toBeNull();
    for (const reason of gateFailed.decision.reasons) {
      expect(state.notice).toContain(reason);
    }
  });

  it("pushes a banner when the response carries a gateway error", () => {
    const degraded: OrderAttemptResponse = {
      ...gateFailed,
      gateway_error: "connection refused",
    };
    const state = attemptResolved(selected(), degraded);
    expect(state.banners.some((b) => b.includes("connection refused"))).toBe(true);
  });
});

describe("acknowledge reason gating", () => {
  it("requires a reason only for acknowledged_continue", () => {
    const state = attemptResolved(selected(), displayed);
    const alert = state.openAlert!;
    expect(canSubmit(alert, "acknowledged_continue")).toBe(false);
    expect(canSubmit(alert, "discontinued")).toBe(true);
    expect(canSubmit(alert, "reduced_every_other_day")).toBe(true);
    expect(canSubmit(alert, "reduced_weekly")).toBe(true);

    const reasons = alert.payload.acknowledge_reasons;
    const withReason = reasonPicked(state, reasons[0] ?? "");
    expect(canSubmit(withReason.openAlert!, "acknowledged_continue")).toBe(true);
  });
});

describe("actionResolved", () => {
  it("closes the modal and records the action", () => {
    const open = attemptResolved(selected(), displayed);
    const state = actionResolved(open, reduce);
    expect(state.openAlert).toBeNull();
    expect(state.history).toHaveLength(1);
    const record = state.history[0]!;
    expect(record.action).toBe("reduced_every_other_day");
    expect(record.survivingOrderId).toBe(reduce.order.order_id);
    expect(record.replacedOrderId).toBe(reduce.replaced_order_id);
  });

  it("rejects an action with no open alert", () => {
    expect(() => actionResolved(selected(), reduce)).toThrow(/no open alert/);
  });
});

describe("encounter selection and data", () => {
  it("clears per-encounter panels on select", () => {
    let state = censusLoaded(initialState(), census.encounters);
    state = encounterSelected(state, displayed.order.encounter_id);
    state = encounterDataLoaded(state, {
      labs: labs.results,
      prediction,
      orders: orders.orders,
    });
    expect(state.labs).toHaveLength(labs.results.length);
    expect(state.orders).toHaveLength(orders.orders.length);

    const other = census.encounters.find(
      (r) => r.encounter_id !== displayed.order.encounter_id,
    )!;
    const reselected = encounterSelected(state, other.encounter_id);
    expect(reselected.labs).toHaveLength(0);
    expect(reselected.orders).toHaveLength(0);
    expect(reselected.prediction).toBeNull();
    expect(reselected.lastDecision).toBeNull();
  });

  it("refuses to change encounter while the modal is open", () => {
    const state = attemptResolved(selected(), displayed);
    expect(() => encounterSelected(state, "enc-other")).toThrow(/open alert/);
  });
});

describe("badging and chrome", () => {
  it("flags predictions older than the badge cutoff", () => {
    expect(isStale(prediction)).toBe(prediction.staleness_h > 8);
    expect(isStale({ ...prediction, staleness_h: 9.5 })).toBe(true);
    expect(isStale({ ...prediction, staleness_h: 2.0 })).toBe(false);
    expect(isStale(null)).toBe(false);
  });

  it("stacks and dismisses banners by index", () => {
    let state = bannerPushed(initialState(), "one");
    state = bannerPushed(state, "two");
    expect(state.banners).toEqual(["one", "two"]);
    state = bannerDismissed(state, 0);
    expect(state.banners).toEqual(["two"]);
  });

  it("dismisses the notice", () => {
    const state = noticeDismissed(attemptResolved(selected(), silent));
    expect(state.notice).toBeNull();
  });
});

describe("renewalCandidate", () => {
  it("picks the active daily CBC standing order", () => {
    const base = orders.orders[0];
    if (!base) throw new Error("fixture empty");
    const daily = { ...base, status: "active" as const, frequency: "daily_or_higher" };
    expect(renewalCandidate([daily])).toBe(daily.order_id);
  });

  it("ignores modified, discontinued, and non-daily orders", () => {
    const base = orders.orders[0];
    if (!base) throw new Error("fixture empty");
    expect(
      renewalCandidate([
        { ...base, status: "modified" as const, frequency: "daily_or_higher" },
        { ...base, status: "discontinued" as const, frequency: "daily_or_higher" },
        { ...base, status: "active" as const, frequency: "every_other_day" },
      ]),
    ).toBeNull();
    expect(renewalCandidate([])).toBeNull();
  });

  it("finds nothing to renew in the post-reduce fixture", () => {
    // after a reduce the only active order is every_other_day
    expect(renewalCandidate(orders.orders)).toBeNull();
  });
});
