import type {
  ActionResponse,
  AlertAction,
  AlertPayload,
  CensusRow,
  GateDecision,
  LabResultRow,
  OrderAttemptResponse,
  OrderSummary,
  PredictionResponse,
} from "./types.js";

/** Staleness badge cutoff, hours. Presentation only: the server enforces
 * its own staleness rule inside the gate. */
export const STALE_BADGE_H = 8;

export interface OpenAlert {
  eventId: string;
  encounterId: string;
  orderId: string;
  payload: AlertPayload;
  selectedReason: string | null;
}

export interface ActionRecord {
  eventId: string;
  encounterId: string;
  action: AlertAction;
  reason: string | null;
  survivingOrderId: string;
  replacedOrderId: string | null;
}

export interface ConsoleState {
  encounters: CensusRow[];
  selectedId: string | null;
  orders: OrderSummary[];
  labs: LabResultRow[];
  prediction: PredictionResponse | null;
  lastDecision: GateDecision | null;
  openAlert: OpenAlert | null;
  history: ActionRecord[];
  banners: string[];
  notice: string | null;
}

export function initialState(): ConsoleState {
  return {
    encounters: [],
    selectedId: null,
    orders: [],
    labs: [],
    prediction: null,
    lastDecision: null,
    openAlert: null,
    history: [],
    banners: [],
    notice: null,
  };
}

export function censusLoaded(
  state: ConsoleState,
  rows: CensusRow[],
): ConsoleState {
  return { ...state, encounters: rows };
}

export function encounterSelected(
  state: ConsoleState,
  encounterId: string,
): ConsoleState {
  if (state.openAlert) throw new Error("cannot change encounter with an open alert");
  return {
    ...state,
    selectedId: encounterId,
    orders: [],
    labs: [],
    prediction: null,
    lastDecision: null,
    notice: null,
  };
}

export function encounterDataLoaded(
  state: ConsoleState,
  data: {
    labs?: LabResultRow[];
    prediction?: PredictionResponse | null;
    orders?: OrderSummary[];
  },
): ConsoleState {
  return {
    ...state,
    labs: data.labs ?? state.labs,
    prediction: data.prediction === undefined ? state.prediction : data.prediction,
    orders: data.orders ?? state.orders,
  };
}

/** Fold an order-attempt response in. Opens the modal iff the server sent a
 * payload; a silent-arm or gate-failed attempt becomes a notice instead. */
export function attemptResolved(
  state: ConsoleState,
  response: OrderAttemptResponse,
): ConsoleState {
  if (state.openAlert) {
    throw new Error("alert modal already open; at most one may exist");
  }
  const next: ConsoleState = {
    ...state,
    lastDecision: response.decision,
    notice: null,
  };
  if (response.displayed && response.payload) {
    next.openAlert = {
      eventId: response.alert_event_id,
      encounterId: response.order.encounter_id,
      orderId: response.order.order_id,
      payload: response.payload,
      selectedReason: null,
    };
  } else if (response.silently_logged) {
    next.notice =
      "Order placed. The attempt was silently logged (control arm); no alert is shown.";
  } else {
    const reasons = response.decision.reasons.join(", ") || "gate not met";
    next.notice = `Order placed without alert (${reasons}).`;
  }
  if (response.gateway_error) {
    next.banners = [...state.banners, `Gateway error: ${response.gateway_error}`];
  }
  return next;
}

export function reasonPicked(
  state: ConsoleState,
  reason: string | null,
): ConsoleState {
  if (!state.openAlert) return state;
  return { ...state, openAlert: { ...state.openAlert, selectedReason: reason } };
}

export function actionRequiresReason(action: AlertAction): boolean {
  return action === "acknowledged_continue";
}

/** Submit-enabled rule for a modal button; mirrors the server's payload
 * invariant so the console never sends a request it knows will 422. */
export function canSubmit(alert: OpenAlert, action: AlertAction): boolean {
  return !actionRequiresReason(action) || alert.selectedReason != null;
}

export function actionResolved(
  state: ConsoleState,
  response: ActionResponse,
): ConsoleState {
  const alert = state.openAlert;
  if (!alert) throw new Error("no open alert to resolve");
  const record: ActionRecord = {
    eventId: response.alert_event_id,
    encounterId: alert.encounterId,
    action: response.action,
    reason: alert.selectedReason,
    survivingOrderId: response.order.order_id,
    replacedOrderId: response.replaced_order_id,
  };
  return {
    ...state,
    openAlert: null,
    history: [...state.history, record],
  };
}

/** Close without a server round trip is not allowed: dismissing the dialog
 * is itself an action (cancelled_dialog) and must be posted. This helper is
 * only for when that post has succeeded. */
export function alertClosed(state: ConsoleState): ConsoleState {
  return { ...state, openAlert: null };
}

export function bannerPushed(state: ConsoleState, text: string): ConsoleState {
  return { ...state, banners: [...state.banners, text] };
}

export function bannerDismissed(state: ConsoleState, index: number): ConsoleState {
  return { ...state, banners: state.banners.filter((_, i) => i !== index) };
}

export function noticeDismissed(state: ConsoleState): ConsoleState {
  return { ...state, notice: null };
}

export function isStale(prediction: PredictionResponse | null): boolean {
  return prediction != null && prediction.staleness_h > STALE_BADGE_H;
}

/** Ordering a daily CBC on an encounter that already has an active daily
 * CBC standing order is a renewal of that order, not a second one. Returns
 * the order to renew, or null when the attempt should draft a fresh order. */
export function renewalCandidate(orders: OrderSummary[]): string | null {
  const existing = orders.find(
    (o) =>
      o.status === "active" &&
      o.panel === "CBC" &&
      o.frequency === "daily_or_higher",
  );
  return existing ? existing.order_id : null;
}

/** Modal button order is fixed by the payload's option list. */
export const OPTION_TO_ACTION: Record<string, AlertAction> = {
  acknowledge_continue: "acknowledged_continue",
  discontinue: "discontinued",
  every_other_day: "reduced_every_other_day",
  weekly: "reduced_weekly",
};

export const ACTION_LABELS: Record<AlertAction, string> = {
  acknowledged_continue: "Acknowledge & Continue",
  discontinued: "Discontinue",
  reduced_every_other_day: "Every Other Day",
  reduced_weekly: "Weekly",
  cancelled_dialog: "Close",
};
