/** Wire types for the labsentry /v1 JSON API. Field names mirror the
 * server's serialization exactly; every value the console renders comes
 * from one of these shapes. */

export type Arm = "treatment" | "control";

export interface CensusRow {
  encounter_id: string;
  unit?: string;
  age?: number;
  sex?: string;
  panel_probability?: number;
  staleness_h?: number;
  arm: Arm | null;
}

export interface CensusResponse {
  as_of: string;
  encounters: CensusRow[];
}

export interface LabResultRow {
  component: string;
  value: number;
  observed_at: string;
  abnormal: boolean;
}

export interface LabsResponse {
  encounter_id: string;
  as_of: string;
  window_h: number;
  results: LabResultRow[];
}

export interface PredictionRecord {
  kind: "prediction";
  encounter_id: string;
  computed_at: string;
  p: Record<string, number>;
  panel_probability: number;
  model_version: string;
  input_snapshot_hash: string;
  not_predictable: string[];
}

export interface PredictionResponse {
  prediction: PredictionRecord;
  staleness_h: number;
}

export interface GateDecision {
  show: boolean;
  reasons: string[];
  prediction_used: PredictionRecord | null;
}

export interface ResultCell {
  value: number;
  observed_at: string;
  abnormal: boolean;
}

export interface AlertPayload {
  headline: string;
  panel_probability: number;
  components: Record<string, ResultCell[]>;
  info_link: string;
  options: string[];
  acknowledge_reasons: string[];
}

export type OrderStatus = "active" | "discontinued" | "modified";

export interface OrderSummary {
  order_id: string;
  encounter_id: string;
  panel: string;
  frequency: string;
  status: OrderStatus;
  start_at: string;
  end_at: string;
}

export interface OrdersResponse {
  encounter_id: string;
  orders: OrderSummary[];
}

export interface OrderAttemptResponse {
  alert_event_id: string;
  displayed: boolean;
  silently_logged: boolean;
  decision: GateDecision;
  order: OrderSummary;
  gateway_error?: string | null;
  payload?: AlertPayload;
}

/** Wire action values accepted by POST /v1/alerts/{id}/action. */
export type AlertAction =
  | "acknowledged_continue"
  | "discontinued"
  | "reduced_every_other_day"
  | "reduced_weekly"
  | "cancelled_dialog";

export interface ActionResponse {
  alert_event_id: string;
  action: AlertAction;
  order: OrderSummary;
  replaced_order_id: string | null;
}
